#pragma once

#include "sidecar/binary_io.hpp"
#include "sidecar/checks.hpp"
#include "sidecar/diffcore.hpp"
#include "sidecar/harness.hpp"
#include "sidecar/losses.hpp"
#include "sidecar/models.hpp"
#include "sidecar/problems.hpp"
#include "sidecar/quadrature.hpp"
#include "sidecar/reference.hpp"
#include "sidecar/training.hpp"
