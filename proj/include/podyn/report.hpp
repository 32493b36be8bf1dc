#pragma once

#include "podyn/probe.hpp"

#include "json.hpp"

#include <map>
#include <string>
#include <vector>

namespace podyn {

inline constexpr const char* kTraceSchema = "podyn.alignment/1";

nlohmann::json record_to_json(const AlignmentRecord& r);
/// Throws ConfigError when the schema tag is missing or different.
AlignmentRecord record_from_json(const nlohmann::json& j);

/// Symmetric log with a linear band: g for |g| < 1, sign(g) (1 + log10 |g|) beyond.
double symlog(double g);
/// Symlog is used once any |G| reaches 10.
bool wants_symlog(const std::vector<double>& values);

/// One line series per objective piece, points sorted by step.
using SeriesMap = std::map<std::string, std::vector<std::pair<long, double>>>;

std::string render_alignment_svg(const std::string& title, const SeriesMap& series);

/// CSV for one (family, objective) pair. For TOT, `pos_plus_neg` and
/// `top_mid_bot` hold the component sums at the same step when present.
std::string render_alignment_csv(const std::vector<AlignmentRecord>& records,
                                 const std::vector<AlignmentRecord>& all_family_records);

/// Shortest decimal that reads back to the same double.
std::string format_double(double v);

}  // namespace podyn
