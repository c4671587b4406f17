#pragma once

#include "streamlab/core.hpp"
#include "streamlab/domain_grid.hpp"
#include "streamlab/ode.hpp"
#include "streamlab/hamiltonian.hpp"
#include "streamlab/chart.hpp"
#include "streamlab/hamiltonian_classes.hpp"
#include "streamlab/thin_sets.hpp"
#include "streamlab/projection.hpp"
#include "streamlab/evolve.hpp"
#include "streamlab/spectral.hpp"
#include "streamlab/lab/fit.hpp"
#include "streamlab/lab/experiments.hpp"
#include "streamlab/lab/config.hpp"
#include "streamlab/lab/report.hpp"
