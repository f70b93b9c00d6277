// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "devcloud/bench.hpp"
#include "devcloud/clock.hpp"
#include "devcloud/cloud.hpp"
#include "devcloud/core.hpp"
#include "devcloud/device.hpp"
#include "devcloud/models.hpp"
#include "devcloud/policy.hpp"
#include "devcloud/profiler.hpp"
#include "devcloud/rng.hpp"
#include "devcloud/specdec.hpp"
#include "devcloud/transport.hpp"
