#pragma once

#include "marginlab/scenario.hpp"

#include <json.hpp>

#include <string>

namespace marginlab {

using json = nlohmann::ordered_json;

// Architecture wire format: {depth, dims, activation, relu_zero_slope,
// layers: [[ [i, j, k], ... ], ...]} with 1-based triples.
json arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const json& j);  // throws SpecError naming the field

json dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const json& j);

json theta_to_json(const ArchSpec& arch, const Vec& theta);  // per-layer arrays
Vec theta_from_json(const ArchSpec& arch, const json& j);

json certificate_to_json(const KktCertificate& cert);
json witness_report_to_json(const WitnessReport& w);
json probe_report_to_json(const ProbeReport& p);
json gap_report_to_json(const GapReport& g);
json balance_report_to_json(const BalanceReport& b);

json scenario_to_json(const Scenario& sc);
Scenario scenario_from_json(const json& j);  // throws SpecError naming the field

json run_report_to_json(const RunReport& r);

// Atomic write: tmp file in the same directory, then rename.
void write_file_atomic(const std::string& path, const std::string& content);

// Load a scenario either from the built-in catalog (by id) or from a JSON
// file path. Throws SpecError with the offending field on malformed input.
Scenario load_scenario(const std::string& id_or_path, const BuildOverrides& ov = {});

}  // namespace marginlab
