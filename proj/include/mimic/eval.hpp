#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/encoder.hpp"
#include "mimic/metrics.hpp"
#include "mimic/mine.hpp"
#include "mimic/trigger.hpp"

namespace mimic {

// ---------------------------------------------------------------------------
// Linear probe: multinomial logistic regression on frozen pre-projector
// features, full-batch gradient descent with weight decay. Features are
// standardized with moments kept inside the probe, so the probe is still a
// single affine layer over raw features.
// ---------------------------------------------------------------------------

struct ProbeConfig {
  int steps = 500;
  double learning_rate = 1.0;
  double weight_decay = 1e-4;
  uint64_t seed = 0;
};

struct LinearProbe {
  MatF w;  // classes x feature_dim
  VecF b;
  VecF mu, sigma;
  int classes = 0;
  uint64_t seed = 0;
};

inline MatF harvest_features(const EncoderState& enc, const ImageBatch& data, int chunk = 512) {
  MatF feats(enc.feature_dim, data.count());
  for (int i = 0; i < data.count(); i += chunk) {
    std::vector<int> idx;
    for (int k = i; k < std::min(data.count(), i + chunk); ++k) idx.push_back(k);
    TapsBatch fwd = forward_with_taps(enc, data.select(idx));
    feats.middleCols(i, idx.size()) = fwd.features;
  }
  return feats;
}

inline LinearProbe train_probe(const EncoderState& enc, const ImageBatch& train,
                               const ProbeConfig& cfg) {
  if (!train.labeled()) throw ContractError("probe training needs labels");
  if (train.count() == 0) throw ContractError("probe training set is empty");
  std::set<int> classes(train.labels.begin(), train.labels.end());
  if (classes.size() < 2) throw ConfigError("probe training set contains a single class");
  const int C = *classes.rbegin() + 1;
  const int n = train.count();

  MatF feats = harvest_features(enc, train);
  LinearProbe probe;
  probe.classes = C;
  probe.seed = cfg.seed;
  probe.mu.resize(enc.feature_dim);
  probe.sigma.resize(enc.feature_dim);
  for (int d = 0; d < enc.feature_dim; ++d) {
    double m = feats.row(d).cast<double>().mean();
    double var = (feats.row(d).cast<double>().array() - m).square().mean();
    probe.mu(d) = float(m);
    probe.sigma(d) = var > 1e-12 ? float(std::sqrt(var)) : 1.0f;
  }
  MatF x = (feats.colwise() - probe.mu).array().colwise() / probe.sigma.array();

  probe.w = MatF::Zero(C, enc.feature_dim);
  probe.b = VecF::Zero(C);
  for (int step = 0; step < cfg.steps; ++step) {
    MatF logits = (probe.w * x).colwise() + probe.b;
    // softmax cross-entropy gradient, full batch
    for (int i = 0; i < n; ++i) {
      VecF col = logits.col(i);
      float mx = col.maxCoeff();
      VecF e = (col.array() - mx).exp();
      logits.col(i) = e / e.sum();
      logits(train.labels[i], i) -= 1.0f;
    }
    logits /= float(n);
    MatF gw = logits * x.transpose() + float(cfg.weight_decay) * probe.w;
    VecF gb = logits.rowwise().sum();
    probe.w -= float(cfg.learning_rate) * gw;
    probe.b -= float(cfg.learning_rate) * gb;
  }
  return probe;
}

inline std::vector<int> probe_predict(const LinearProbe& probe, const MatF& feats) {
  MatF x = (feats.colwise() - probe.mu).array().colwise() / probe.sigma.array();
  MatF logits = (probe.w * x).colwise() + probe.b;
  std::vector<int> pred(logits.cols());
  for (int i = 0; i < logits.cols(); ++i) {
    int arg = 0;
    logits.col(i).maxCoeff(&arg);
    pred[i] = arg;
  }
  return pred;
}

/// Clean accuracy: percentage of correct predictions on an untouched test set.
inline double compute_acc(const EncoderState& enc, const LinearProbe& probe,
                          const ImageBatch& test) {
  if (test.count() == 0) throw ContractError("compute_acc: empty test set");
  if (!test.labeled()) throw ContractError("compute_acc: unlabeled test set");
  std::vector<int> pred = probe_predict(probe, harvest_features(enc, test));
  int correct = 0;
  for (int i = 0; i < test.count(); ++i)
    if (pred[i] == test.labels[i]) ++correct;
  return 100.0 * double(correct) / double(test.count());
}

/// Attack success rate: drop true-target-class samples, stamp the trigger on
/// the rest, report the percentage predicted as the target class.
inline double compute_asr(const EncoderState& enc, const LinearProbe& probe,
                          const ImageBatch& test, const TriggerSpec& trig,
                          bool exclude_target_class = true) {
  if (test.count() == 0) throw ContractError("compute_asr: empty test set");
  if (!test.labeled()) throw ContractError("compute_asr: unlabeled test set");
  std::vector<int> keep;
  for (int i = 0; i < test.count(); ++i)
    if (!exclude_target_class || test.labels[i] != trig.target_class) keep.push_back(i);
  if (keep.empty()) throw ContractError("compute_asr: no samples left after target-class exclusion");
  ImageBatch stamped = stamp_trigger(test.select(keep), trig);
  std::vector<int> pred = probe_predict(probe, harvest_features(enc, stamped));
  int hits = 0;
  for (int p : pred)
    if (p == trig.target_class) ++hits;
  return 100.0 * double(hits) / double(keep.size());
}

// ---------------------------------------------------------------------------
// Figure exports. CSV is the contract; the SVG charts are best-effort.
// ---------------------------------------------------------------------------

namespace figures {

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IngestionError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

/// Minimal grouped line chart over a shared numeric x axis.
inline void write_svg_chart(const std::filesystem::path& path, const std::string& title,
                            const std::vector<double>& xs,
                            const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  if (xs.empty() || series.empty()) return;
  const int W = 640, H = 420, ML = 60, MR = 20, MT = 40, MB = 45;
  double xmin = *std::min_element(xs.begin(), xs.end());
  double xmax = *std::max_element(xs.begin(), xs.end());
  double ymin = 0, ymax = 1e-9;
  for (const auto& [name, ys] : series)
    for (double y : ys) ymax = std::max(ymax, y);
  ymax *= 1.05;
  if (xmax == xmin) xmax = xmin + 1;
  auto px = [&](double x) { return ML + (x - xmin) / (xmax - xmin) * (W - ML - MR); };
  auto py = [&](double y) { return H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB); };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::vector<std::string> out;
  out.push_back("<svg xmlns='http://www.w3.org/2000/svg' width='" + std::to_string(W) +
                "' height='" + std::to_string(H) + "'>");
  out.push_back("<rect width='100%' height='100%' fill='white'/>");
  out.push_back("<text x='" + std::to_string(W / 2) + "' y='24' text-anchor='middle' "
                "font-family='sans-serif' font-size='15'>" + title + "</text>");
  out.push_back("<line x1='" + std::to_string(ML) + "' y1='" + std::to_string(H - MB) + "' x2='" +
                std::to_string(W - MR) + "' y2='" + std::to_string(H - MB) +
                "' stroke='black'/>");
  out.push_back("<line x1='" + std::to_string(ML) + "' y1='" + std::to_string(MT) + "' x2='" +
                std::to_string(ML) + "' y2='" + std::to_string(H - MB) + "' stroke='black'/>");
  for (int t = 0; t <= 4; ++t) {
    double y = ymin + (ymax - ymin) * t / 4;
    out.push_back("<text x='" + std::to_string(ML - 6) + "' y='" + std::to_string(py(y) + 4) +
                  "' text-anchor='end' font-family='sans-serif' font-size='11'>" +
                  std::to_string(y).substr(0, 6) + "</text>");
  }
  int si = 0;
  for (const auto& [name, ys] : series) {
    std::string pts;
    for (size_t i = 0; i < xs.size() && i < ys.size(); ++i)
      pts += std::to_string(px(xs[i])) + "," + std::to_string(py(ys[i])) + " ";
    const char* color = colors[si % 6];
    out.push_back("<polyline points='" + pts + "' fill='none' stroke='" + color +
                  "' stroke-width='2'/>");
    out.push_back("<text x='" + std::to_string(W - MR - 120) + "' y='" +
                  std::to_string(MT + 16 * si) + "' font-family='sans-serif' font-size='12' "
                  "fill='" + color + "'>" + name + "</text>");
    ++si;
  }
  for (size_t i = 0; i < xs.size(); ++i)
    out.push_back("<text x='" + std::to_string(px(xs[i])) + "' y='" + std::to_string(H - MB + 18) +
                  "' text-anchor='middle' font-family='sans-serif' font-size='11'>" +
                  std::to_string(xs[i]).substr(0, 5) + "</text>");
  out.push_back("</svg>");
  write_lines(path, out);
}

}  // namespace figures

struct MIProfilePair {
  MIProfile clean;
  MIProfile triggered;
  std::vector<double> beta;
};

/// Emits the per-figure CSV tables (layer vs MI; sweep value vs ACC/ASR;
/// stage vs ACC/ASR) plus SVG renderings next to them.
inline void export_figures(const std::filesystem::path& dir,
                           const std::vector<MetricsRecord>& records,
                           const MIProfilePair* profiles = nullptr,
                           const std::string& sweep_knob = "",
                           const std::vector<std::array<double, 3>>& sweep_rows = {}) {
  if (records.empty()) throw ContractError("export_figures: no metrics records");
  std::filesystem::create_directories(dir);

  {
    std::vector<std::string> csv = {"stage,acc,asr,target_class,n_eval"};
    std::vector<double> xs;
    std::vector<double> accs, asrs;
    for (size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      csv.push_back(r.stage_tag + "," + std::to_string(r.acc) + "," + std::to_string(r.asr) +
                    "," + std::to_string(r.target_class) + "," + std::to_string(r.n_eval));
      xs.push_back(double(i));
      accs.push_back(r.acc);
      asrs.push_back(r.asr);
    }
    figures::write_lines(dir / "stage_metrics.csv", csv);
    figures::write_svg_chart(dir / "stage_metrics.svg", "ACC / ASR by stage", xs,
                             {{"ACC", accs}, {"ASR", asrs}});
  }

  if (profiles) {
    std::vector<std::string> csv = {"layer,m_clean,m_triggered,beta"};
    std::vector<double> xs, mc, mt, bb;
    for (size_t l = 0; l < profiles->clean.values.size(); ++l) {
      double tm = l < profiles->triggered.values.size() ? profiles->triggered.values[l] : 0.0;
      double b = l < profiles->beta.size() ? profiles->beta[l] : 0.0;
      csv.push_back(std::to_string(l) + "," + std::to_string(profiles->clean.values[l]) + "," +
                    std::to_string(tm) + "," + std::to_string(b));
      xs.push_back(double(l));
      mc.push_back(profiles->clean.values[l]);
      mt.push_back(tm);
      bb.push_back(b);
    }
    figures::write_lines(dir / "mi_profile.csv", csv);
    figures::write_svg_chart(dir / "mi_profile.svg", "Per-layer MI (nats)", xs,
                             {{"clean", mc}, {"triggered", mt}, {"beta", bb}});
  }

  if (!sweep_knob.empty() && !sweep_rows.empty()) {
    std::vector<std::string> csv = {sweep_knob + ",acc,asr"};
    std::vector<double> xs, accs, asrs;
    for (const auto& row : sweep_rows) {
      csv.push_back(std::to_string(row[0]) + "," + std::to_string(row[1]) + "," +
                    std::to_string(row[2]));
      xs.push_back(row[0]);
      accs.push_back(row[1]);
      asrs.push_back(row[2]);
    }
    figures::write_lines(dir / ("sweep_" + sweep_knob + ".csv"), csv);
    figures::write_svg_chart(dir / ("sweep_" + sweep_knob + ".svg"),
                             "ACC / ASR vs " + sweep_knob, xs, {{"ACC", accs}, {"ASR", asrs}});
  }
}

}  // namespace mimic
