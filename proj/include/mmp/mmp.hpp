#pragma once

#include "mmp/core.hpp"
#include "mmp/energy.hpp"
#include "mmp/errors.hpp"
#include "mmp/families.hpp"
#include "mmp/parallel.hpp"
#include "mmp/regression.hpp"
#include "mmp/resampling.hpp"
#include "mmp/rng.hpp"
