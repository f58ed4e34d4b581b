#pragma once

#include <cpd/benchmark.hpp>
#include <cpd/em.hpp>
#include <cpd/estep.hpp>
#include <cpd/fastops.hpp>
#include <cpd/icp.hpp>
#include <cpd/io.hpp>
#include <cpd/kernel.hpp>
#include <cpd/metrics.hpp>
#include <cpd/nonrigid.hpp>
#include <cpd/normalize.hpp>
#include <cpd/report.hpp>
#include <cpd/rigid.hpp>
#include <cpd/synth.hpp>
#include <cpd/transforms.hpp>
#include <cpd/types.hpp>
