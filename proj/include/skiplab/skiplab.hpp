#pragma once

// Umbrella header: the whole library in dependency order.

#include "skiplab/errors.hpp"
#include "skiplab/rng.hpp"
#include "skiplab/tensor.hpp"
#include "skiplab/autodiff.hpp"
#include "skiplab/model.hpp"
#include "skiplab/serialize.hpp"
#include "skiplab/tasks.hpp"
#include "skiplab/training.hpp"
#include "skiplab/probe.hpp"
#include "skiplab/skip_policy.hpp"
#include "skiplab/decode.hpp"
#include "skiplab/config_json.hpp"
#include "skiplab/report.hpp"
#include "skiplab/harness.hpp"
