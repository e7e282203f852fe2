#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "evprice/io.hpp"
#include "evprice/scenario.hpp"
#include "evprice/synthetic.hpp"

using namespace evprice;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInput: return 2;
    case ErrorKind::kInfeasible: return 3;
    case ErrorKind::kSolver: return 4;
    case ErrorKind::kCoverage: return 5;
  }
  return 4;
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::kInput, what + ": cannot parse '" + item + "' as a number");
    }
  }
  if (out.empty()) throw Error(ErrorKind::kInput, what + ": empty list");
  return out;
}

struct Args {
  std::string traffic, grid, lambda_box, out = "out", objective = "value";
  std::uint64_t seed = 1;
  int workers = 1;
  double tol_kkt = 1e-6, tol_active = 1e-7;
};

synthetic::Instance load(const Args& a) {
  if (a.traffic.empty() || a.grid.empty()) throw Error(ErrorKind::kInput, "--traffic and --grid are required");
  return io::load_instance(a.traffic, a.grid);
}

scenario::Options options(const Args& a, int stations) {
  scenario::Options o;
  o.workers = a.workers;
  o.seed = a.seed;
  o.tol_kkt = a.tol_kkt;
  o.tol_active = a.tol_active;
  o.objective = bilevel::parse_region_objective(a.objective);
  if (a.workers < 1) throw Error(ErrorKind::kInput, "--workers must be at least 1");
  if (!a.lambda_box.empty()) {
    const std::vector<double> b = parse_list(a.lambda_box, "--lambda-box");
    if (b.size() != 2 || !(b[0] < b[1])) throw Error(ErrorKind::kInput, "--lambda-box expects lo,hi with lo < hi");
    o.box = mpqp::PriceBox::uniform(stations, b[0], b[1]);
  }
  return o;
}

void emit(const Args& a, const scenario::Output& out) {
  std::filesystem::create_directories(a.out);
  for (const auto& [name, content] : out.files) {
    io::write_text((std::filesystem::path(a.out) / name).string(), content);
    std::cout << "wrote " << (std::filesystem::path(a.out) / name).string() << "\n";
  }
  io::json timing = out.timing;
  timing["schema_version"] = io::kSchemaVersion;
  io::write_json((std::filesystem::path(a.out) / "timing.json").string(), timing);
}

void write_error(const Args& a, const std::string& kind, const std::string& message) {
  const io::json rec = {{"schema_version", io::kSchemaVersion}, {"error", kind}, {"message", message}};
  std::cerr << rec.dump() << "\n";
  try {
    std::filesystem::create_directories(a.out);
    io::write_json((std::filesystem::path(a.out) / "error.json").string(), rec);
  } catch (...) {
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Charging-station pricing on coupled traffic and distribution networks"};
  app.require_subcommand(1);
  Args a;
  // Options live on the top-level app and fall through from subcommands.
  app.option_defaults()->always_capture_default();
  app.add_option("--traffic", a.traffic, "Traffic network file (JSON)")->envname("EVPRICE_TRAFFIC");
  app.add_option("--grid", a.grid, "Grid case file (JSON)")->envname("EVPRICE_GRID");
  app.add_option("--lambda-box", a.lambda_box, "Station price box lo,hi in $/kWh")->envname("EVPRICE_LAMBDA_BOX");
  app.add_option("--seed", a.seed, "Seed for all sampling")->envname("EVPRICE_SEED");
  app.add_option("--workers", a.workers, "Worker threads")->envname("EVPRICE_WORKERS");
  app.add_option("--out", a.out, "Output directory")->envname("EVPRICE_OUT");
  app.add_option("--tol-kkt", a.tol_kkt, "KKT residual tolerance")->envname("EVPRICE_TOL_KKT");
  app.add_option("--tol-active", a.tol_active, "Active-set tolerance")->envname("EVPRICE_TOL_ACTIVE");
  app.add_option("--region-objective", a.objective, "Per-region upper-level objective: value or expense")
      ->envname("EVPRICE_REGION_OBJECTIVE");

  auto* solve = app.add_subcommand("solve", "Solve the bilevel pricing problem; writes result.json")->fallthrough();
  auto* regions = app.add_subcommand("regions", "Enumerate critical regions; writes partition.json")->fallthrough();

  std::string demands;
  auto* sweep_demand = app.add_subcommand("sweep-demand", "Sweep the demand per O-D pair")->fallthrough();
  sweep_demand->add_option("--demands", demands, "Comma-separated demand levels")->required();

  std::string generator, costs;
  auto* sweep_cost = app.add_subcommand("sweep-cost", "Sweep one generator's cost")->fallthrough();
  sweep_cost->add_option("--generator", generator, "Generator id")->required();
  sweep_cost->add_option("--costs", costs, "Comma-separated costs in $/kWh")->required();

  scenario::ForecastSpec fspec;
  auto* forecast = app.add_subcommand("forecast-mc", "Monte Carlo forecast-error study")->fallthrough();
  forecast->add_option("--truth", fspec.truth, "True demand per O-D pair");
  forecast->add_option("--deviation", fspec.deviation_pct, "Forecast deviation in percent");
  forecast->add_option("--samples", fspec.samples, "Number of forecasts");
  forecast->add_flag("--full-resolve", fspec.full_resolve, "Realize by re-solving at the true demand");

  auto* baseline = app.add_subcommand("baseline", "Compare with lowest-price charging")->fallthrough();

  scenario::VerifyOptions vopt;
  auto* verify = app.add_subcommand("verify", "Run the oracle suite")->fallthrough();
  verify->add_option("--instances", vopt.instances, "Random instances");
  verify->add_option("--samples", vopt.samples, "Price samples per instance");

  std::string which = "toy";
  auto* generate = app.add_subcommand("generate", "Write a synthetic instance as traffic.json and grid.json")->fallthrough();
  generate->add_option("--instance", which, "toy, two-station, saturated or random")
      ->check(CLI::IsMember({"toy", "two-station", "saturated", "random"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*generate) {
      synthetic::Instance inst = which == "toy"           ? synthetic::one_station_toy()
                                 : which == "two-station" ? synthetic::two_station_asymmetric()
                                 : which == "saturated"   ? synthetic::saturated_outer_stations()
                                                          : synthetic::random_instance(a.seed);
      std::filesystem::create_directories(a.out);
      const auto dir = std::filesystem::path(a.out);
      io::save_instance(inst, (dir / "traffic.json").string(), (dir / "grid.json").string());
      std::cout << "wrote " << (dir / "traffic.json").string() << " and " << (dir / "grid.json").string() << "\n";
      return 0;
    }
    if (*verify) {
      if (!a.traffic.empty() || !a.grid.empty()) vopt.extra.push_back(load(a));
      const scenario::Options o = options(a, 0);
      const scenario::VerifyReport rep = scenario::run_verify(o, vopt);
      std::cout << rep.to_text();
      std::filesystem::create_directories(a.out);
      io::write_json((std::filesystem::path(a.out) / "verify.json").string(), rep.to_json());
      return rep.passed() ? 0 : 1;
    }

    const synthetic::Instance inst = load(a);
    const scenario::Options o = options(a, inst.grid.num_stations());
    scenario::Output out;
    if (*solve) out = scenario::run_solve(inst, o);
    else if (*regions) out = scenario::run_regions(inst, o);
    else if (*sweep_demand) out = scenario::run_demand_sweep(inst, parse_list(demands, "--demands"), o);
    else if (*sweep_cost) out = scenario::run_cost_sweep(inst, generator, parse_list(costs, "--costs"), o);
    else if (*forecast) {
      fspec.seed = a.seed;
      out = scenario::run_forecast_mc(inst, fspec, o);
    } else if (*baseline) out = scenario::run_baseline(inst, o);
    emit(a, out);
    return 0;
  } catch (const Error& e) {
    write_error(a, to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    write_error(a, "solver", e.what());
    return 4;
  }
}
