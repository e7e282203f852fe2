#pragma once

#include <cstdint>
#include <string>

#include "evprice/grid.hpp"
#include "evprice/mpqp.hpp"
#include "evprice/traffic.hpp"

namespace evprice::synthetic {

/// A coupled traffic/grid instance with its price box.
struct Instance {
  std::string name;
  traffic::TrafficInput traffic;
  traffic::BuildOptions build;
  grid::DistributionCase grid;
  mpqp::PriceBox box;
};

/// One station between two arcs; one O-D pair with a charging route and a
/// bypass route. ε_f = 0, γ = 10³, R = 10⁴, e = 12, ρ = 200, cap 100,
/// demand 150, box [−10, 10]. Demand: 1200 kWh for λ ≤ −20/3, 0 for
/// λ ≥ −5, slope −e²R/(2γ) = −720 in between.
Instance one_station_toy();

/// Two symmetric charging stations; the grid reaches one of them through a
/// cheap generator and a tight line, the other through an expensive one.
Instance two_station_asymmetric();

/// Three stations in a row; the outer two have small charge capacity and
/// cheap power, so they saturate. `demand` is the EV demand per O-D pair.
Instance saturated_outer_stations(double demand = 300.0);

struct RandomSpec {
  int min_nodes = 4, max_nodes = 8;
  int min_stations = 1, max_stations = 3;
  int min_pairs = 1, max_pairs = 3;
  int min_routes = 2, max_routes = 4;
  int min_buses = 4, max_buses = 8;
  int min_generators = 2, max_generators = 3;
};

/// Random DAG traffic network and radial grid. Every EV route charges at
/// exactly one station and bypasses the others. Capacities are raised until
/// the traffic QP and the OPF at every extreme demand are feasible.
Instance random_instance(std::uint64_t seed, const RandomSpec& spec = {});

/// Λ = [0, 2·max c] per station.
mpqp::PriceBox default_price_box(const grid::DistributionCase& grid);

/// Same instance with every positive O-D demand replaced by `demand`.
Instance with_uniform_demand(Instance inst, double demand);

}  // namespace evprice::synthetic
