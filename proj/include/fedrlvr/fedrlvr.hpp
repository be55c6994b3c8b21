#pragma once

#include "fedrlvr/client.hpp"
#include "fedrlvr/config.hpp"
#include "fedrlvr/experiment.hpp"
#include "fedrlvr/factors_io.hpp"
#include "fedrlvr/federation.hpp"
#include "fedrlvr/grpo.hpp"
#include "fedrlvr/metrics.hpp"
#include "fedrlvr/model.hpp"
#include "fedrlvr/optimizer.hpp"
#include "fedrlvr/parallel.hpp"
#include "fedrlvr/pubswap.hpp"
#include "fedrlvr/rng.hpp"
#include "fedrlvr/tasks.hpp"
