#pragma once

// Umbrella header for the rpce library.

#include "rpce/error.hpp"
#include "rpce/numerics.hpp"
#include "rpce/hermite.hpp"
#include "rpce/sparse_recovery.hpp"
#include "rpce/sir.hpp"
#include "rpce/rotate.hpp"
#include "rpce/problems.hpp"
#include "rpce/model_io.hpp"
#include "rpce/harness.hpp"
