#pragma once

#include "locvar/error.hpp"
#include "locvar/grid_process.hpp"
#include "locvar/gm_kernel.hpp"
#include "locvar/local_variogram.hpp"
#include "locvar/bandwidth_select.hpp"
#include "locvar/variance_pipeline.hpp"
#include "locvar/harness.hpp"
