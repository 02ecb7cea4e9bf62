#ifndef MUMLOC_MUMLOC_HPP
#define MUMLOC_MUMLOC_HPP

#include "mumloc/error.hpp"
#include "mumloc/evaluation.hpp"
#include "mumloc/forward.hpp"
#include "mumloc/grid.hpp"
#include "mumloc/io.hpp"
#include "mumloc/parallel.hpp"
#include "mumloc/psf.hpp"
#include "mumloc/rng.hpp"
#include "mumloc/simulator.hpp"
#include "mumloc/solver.hpp"

#endif  // MUMLOC_MUMLOC_HPP
