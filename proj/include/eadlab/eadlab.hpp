#pragma once

// Umbrella header for the library.

#include "eadlab/attacks.hpp"
#include "eadlab/data.hpp"
#include "eadlab/diag.hpp"
#include "eadlab/env.hpp"
#include "eadlab/error.hpp"
#include "eadlab/io.hpp"
#include "eadlab/models.hpp"
#include "eadlab/optim.hpp"
#include "eadlab/rng.hpp"
#include "eadlab/tensor.hpp"
#include "eadlab/train.hpp"
