#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "deepcot/error.hpp"
#include "deepcot/model.hpp"
#include "deepcot/persistence.hpp"

namespace deepcot {

// Externally generated reference cases. A fixture directory holds index.json:
//   {"format_version": 1,
//    "cases": [{"case_id", "manifest", "input", "expected", "tolerance"?}, ...]}
// with paths relative to the directory. Expected outputs are the streamed
// outputs of the model for the input stream, one row per token.
struct FixtureCase {
  std::string case_id;
  std::filesystem::path manifest;
  std::filesystem::path input;
  std::filesystem::path expected;
  double tolerance = 1e-6;  // relative, against max(|expected|_inf, 1)
};

struct FixtureResult {
  std::string case_id;
  bool passed = false;
  double max_rel_error = 0.0;
  std::string detail;
};

inline std::vector<FixtureCase> read_fixture_index(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  const json index = read_manifest(index_path);
  const std::string where = "fixture index '" + index_path.string() + "'";
  if (!index.contains("format_version") || index["format_version"] != kFormatVersion) {
    throw FormatError(where + ": unsupported or missing format_version");
  }
  if (!index.contains("cases") || !index["cases"].is_array()) throw FormatError(where + ": missing cases array");
  std::vector<FixtureCase> out;
  try {
    for (const auto& c : index["cases"]) {
      FixtureCase fc;
      fc.case_id = c.at("case_id").get<std::string>();
      fc.manifest = dir / c.at("manifest").get<std::string>();
      fc.input = dir / c.at("input").get<std::string>();
      fc.expected = dir / c.at("expected").get<std::string>();
      if (c.contains("tolerance")) fc.tolerance = c["tolerance"].get<double>();
      if (!(fc.tolerance > 0.0)) throw FormatError(where + ": case " + fc.case_id + " has non-positive tolerance");
      out.push_back(std::move(fc));
    }
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  return out;
}

inline FixtureResult check_fixture(const FixtureCase& fc) {
  const auto model = load_model<double>(fc.manifest);
  const auto input = load_stream<double>(fc.input);
  const auto expected = load_stream<double>(fc.expected);
  FixtureResult r{fc.case_id, false, 0.0, {}};
  if (input.cols() != model.config.dim || expected.cols() != model.config.dim || expected.rows() != input.rows()) {
    r.detail = "stream shapes do not match the model";
    return r;
  }
  StreamState<double> state(model.config);
  for (std::size_t t = 0; t < input.rows(); ++t) {
    const auto y = stream_step<double>(model, state, input.row(t));
    const double scale = std::max(max_abs<double>(expected.row(t)), 1.0);
    r.max_rel_error = std::max(r.max_rel_error, max_abs_diff<double>(y, expected.row(t)) / scale);
  }
  r.passed = r.max_rel_error <= fc.tolerance;
  r.detail = "max rel err " + std::to_string(r.max_rel_error) + " (tolerance " + std::to_string(fc.tolerance) + ")";
  return r;
}

}  // namespace deepcot
