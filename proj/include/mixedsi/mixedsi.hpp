#pragma once

#include "mixedsi/analytic.hpp"
#include "mixedsi/bootstrap.hpp"
#include "mixedsi/errors.hpp"
#include "mixedsi/estimation.hpp"
#include "mixedsi/io.hpp"
#include "mixedsi/maxstat.hpp"
#include "mixedsi/model.hpp"
#include "mixedsi/monte_carlo.hpp"
#include "mixedsi/parallel.hpp"
#include "mixedsi/random.hpp"
#include "mixedsi/simulation.hpp"
