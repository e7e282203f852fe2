#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "evprice/bilevel.hpp"
#include "evprice/grid.hpp"
#include "evprice/mpqp.hpp"
#include "evprice/synthetic.hpp"
#include "evprice/traffic.hpp"

namespace evprice::io {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Throws Error(kInput) when the file is missing or not valid JSON.
json read_json(const std::string& path);
void write_json(const std::string& path, const json& doc);
void write_text(const std::string& path, const std::string& text);

/// Traffic file: time_value, route_regularization, expand_routes, optional
/// defaults for missing arc/station fields, nodes, arcs, stations, od_pairs.
void parse_traffic(const json& doc, traffic::TrafficInput& input, traffic::BuildOptions& build);
json traffic_to_json(const traffic::TrafficInput& input, const traffic::BuildOptions& build);

/// Grid file: buses, lines (by bus id), generators (by bus id) and an
/// optional station → bus table. Stations missing from the table fall back
/// to the traffic file's grid_bus.
grid::DistributionCase parse_grid(const json& doc, const traffic::TrafficInput& traffic);
json grid_to_json(const grid::DistributionCase& grid, const traffic::TrafficInput& traffic);

/// Loads both files; the price box defaults to [0, 2·max c].
synthetic::Instance load_instance(const std::string& traffic_path, const std::string& grid_path);
void save_instance(const synthetic::Instance& inst, const std::string& traffic_path, const std::string& grid_path);

/// Region records with R, r, base point, demand map, value map, tight set
/// and working set. Import leaves policy.jacobian empty.
json partition_to_json(const mpqp::PiecewiseAffineDemandFunction& pi);
mpqp::PiecewiseAffineDemandFunction partition_from_json(const json& doc);

json result_to_json(const bilevel::BilevelResult& result, const synthetic::Instance& inst,
                    const bilevel::KktReport* kkt, const mpqp::PiecewiseAffineDemandFunction* pi);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // First line "# schema_version=N", then the header and rows.
  std::string to_csv() const;
};

/// Shortest representation that reads back to the same double.
std::string format_number(double x);

json to_json(const Eigen::VectorXd& v);
json to_json(const Eigen::MatrixXd& m);
Eigen::VectorXd vector_from_json(const json& j);
Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index cols);

}  // namespace evprice::io
