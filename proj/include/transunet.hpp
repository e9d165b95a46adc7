// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "transunet/checkpoint.hpp"
#include "transunet/config.hpp"
#include "transunet/gradcheck_suite.hpp"
#include "transunet/metrics.hpp"
#include "transunet/model.hpp"
#include "transunet/report.hpp"
#include "transunet/synth.hpp"
#include "transunet/trainer.hpp"
