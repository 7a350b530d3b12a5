#pragma once

// Umbrella header.

#include "cgraph/cnc.hpp"
#include "cgraph/config.hpp"
#include "cgraph/diagnostics.hpp"
#include "cgraph/episode.hpp"
#include "cgraph/gradcheck.hpp"
#include "cgraph/graph.hpp"
#include "cgraph/model.hpp"
#include "cgraph/ops.hpp"
#include "cgraph/optim.hpp"
#include "cgraph/rng.hpp"
#include "cgraph/serialize.hpp"
#include "cgraph/smd.hpp"
#include "cgraph/spg.hpp"
#include "cgraph/synth.hpp"
#include "cgraph/tensor.hpp"
#include "cgraph/train.hpp"
#include "cgraph/verify.hpp"
