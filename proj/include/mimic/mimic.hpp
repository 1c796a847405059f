#pragma once

// Umbrella header for the MIMIC backdoor-mitigation toolkit.

#include "mimic/attack.hpp"
#include "mimic/augment.hpp"
#include "mimic/chain_mi.hpp"
#include "mimic/checkpoint.hpp"
#include "mimic/common.hpp"
#include "mimic/config.hpp"
#include "mimic/contrastive.hpp"
#include "mimic/dataset.hpp"
#include "mimic/distill.hpp"
#include "mimic/encoder.hpp"
#include "mimic/eval.hpp"
#include "mimic/image.hpp"
#include "mimic/metrics.hpp"
#include "mimic/mine.hpp"
#include "mimic/optimizer.hpp"
#include "mimic/pipeline.hpp"
#include "mimic/rng.hpp"
#include "mimic/trigger.hpp"
