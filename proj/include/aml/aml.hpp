#pragma once

// Everything at once.
#include "aml/error.hpp"
#include "aml/rng.hpp"
#include "aml/matrix.hpp"
#include "aml/diffgraph.hpp"
#include "aml/adam.hpp"
#include "aml/mlp.hpp"
#include "aml/io.hpp"
#include "aml/relnet.hpp"
#include "aml/domains.hpp"
#include "aml/amltrain.hpp"
#include "aml/metrics.hpp"
#include "aml/transfer.hpp"
