/*
 * Copyright 2026 The posbias Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "posbias/estimators.hpp"
#include "posbias/evaluation.hpp"
#include "posbias/interventions.hpp"
#include "posbias/logdata.hpp"
#include "posbias/parallel.hpp"
#include "posbias/rng.hpp"
#include "posbias/simulator.hpp"
#include "posbias/types.hpp"
