#pragma once

#include "bgw/error.hpp"
#include "bgw/blockmat.hpp"
#include "bgw/rng.hpp"
#include "bgw/process.hpp"
#include "bgw/estimators.hpp"
#include "bgw/inference.hpp"
#include "bgw/montecarlo.hpp"
#include "bgw/io.hpp"
