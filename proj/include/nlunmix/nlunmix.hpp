#ifndef NLUNMIX_NLUNMIX_HPP
#define NLUNMIX_NLUNMIX_HPP

#include "data_model.hpp"
#include "dual_solver.hpp"
#include "errors.hpp"
#include "image_io.hpp"
#include "kernels.hpp"
#include "metrics.hpp"
#include "multiscale.hpp"
#include "simplex_qp.hpp"
#include "simulation.hpp"
#include "statistics.hpp"
#include "unmixers.hpp"

#endif  // NLUNMIX_NLUNMIX_HPP
