#include "podyn/report.hpp"

#include "podyn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace podyn {
namespace {

using nlohmann::json;

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string tick_label(double g) {
  if (g == 0.0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", g);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return json(v).dump();
}

json record_to_json(const AlignmentRecord& r) {
  json groups = json::array();
  for (const auto& [name, g] : r.group_g) groups.push_back({name, g});
  return json{{"schema", kTraceSchema},
              {"step", r.step},
              {"objective", to_string(r.objective)},
              {"g", r.g_value},
              {"n_batches_used", r.n_batches_used},
              {"n_batches_filtered", r.n_batches_filtered},
              {"obj_grad_norm", r.obj_grad_norm},
              {"target_grad_norm", r.target_grad_norm},
              {"g_preconditioned", r.g_preconditioned},
              {"loss_increased", r.loss_increased},
              {"group_g", groups},
              {"family", r.family},
              {"checkpoint", r.checkpoint}};
}

AlignmentRecord record_from_json(const json& j) {
  if (!j.is_object() || !j.contains("schema") || j.at("schema") != kTraceSchema) {
    throw ConfigError("schema", std::string("trace schema mismatch, expected ") + kTraceSchema);
  }
  try {
    AlignmentRecord r;
    r.step = j.at("step").get<long>();
    r.objective = objective_id_from_string(j.at("objective").get<std::string>());
    r.g_value = j.at("g").get<double>();
    r.n_batches_used = j.at("n_batches_used").get<int>();
    r.n_batches_filtered = j.at("n_batches_filtered").get<int>();
    r.obj_grad_norm = j.at("obj_grad_norm").get<double>();
    r.target_grad_norm = j.at("target_grad_norm").get<double>();
    r.g_preconditioned = j.at("g_preconditioned").get<double>();
    r.loss_increased = j.at("loss_increased").get<bool>();
    for (const auto& g : j.at("group_g")) r.group_g.emplace_back(g.at(0).get<std::string>(), g.at(1).get<double>());
    r.family = j.at("family").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw ConfigError("trace", std::string("malformed record: ") + e.what());
  }
}

double symlog(double g) {
  const double a = std::abs(g);
  if (a < 1.0) return g;
  return std::copysign(1.0 + std::log10(a), g);
}

bool wants_symlog(const std::vector<double>& values) {
  return std::any_of(values.begin(), values.end(), [](double v) { return std::abs(v) >= 10.0; });
}

std::string render_alignment_svg(const std::string& title, const SeriesMap& series) {
  constexpr double W = 720, H = 420, L = 80, R = 150, T = 40, B = 50;
  std::vector<double> all;
  long s_min = 0, s_max = 1;
  bool first = true;
  for (const auto& [name, pts] : series) {
    for (const auto& [s, g] : pts) {
      all.push_back(g);
      if (first) {
        s_min = s_max = s;
        first = false;
      }
      s_min = std::min(s_min, s);
      s_max = std::max(s_max, s);
    }
  }
  if (s_max == s_min) s_max = s_min + 1;
  const bool log_axis = wants_symlog(all);
  const auto f = [&](double g) { return log_axis ? symlog(g) : g; };

  double y_lo = 0.0, y_hi = 0.0;
  for (double g : all) {
    y_lo = std::min(y_lo, f(g));
    y_hi = std::max(y_hi, f(g));
  }
  if (y_hi - y_lo < 1e-12) {
    y_lo -= 1.0;
    y_hi += 1.0;
  }
  const double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;

  const auto px = [&](long s) {
    return L + (W - L - R) * static_cast<double>(s - s_min) / static_cast<double>(s_max - s_min);
  };
  const auto py = [&](double v) { return T + (H - T - B) * (y_hi - v) / (y_hi - y_lo); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"15\">" << xml_escape(title) << "</text>\n";

  std::vector<double> ticks;
  if (log_axis) {
    ticks.push_back(0.0);
    const double top = std::max(std::abs(y_lo), std::abs(y_hi));
    for (int k = 0; 1.0 + k <= top; ++k) {
      const double mag = std::pow(10.0, k);
      ticks.push_back(mag);
      ticks.push_back(-mag);
    }
  } else {
    for (int i = 0; i <= 4; ++i) ticks.push_back(y_lo + (y_hi - y_lo) * i / 4.0);
  }
  for (double t : ticks) {
    const double v = f(t);
    if (v < y_lo || v > y_hi) continue;
    const double y = py(v);
    os << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << fixed(y) << "\" y2=\""
       << fixed(y) << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << fixed(y + 4) << "\" text-anchor=\"end\" "
       << "font-family=\"sans-serif\" font-size=\"11\">"
       << (log_axis ? tick_label(t) : tick_label(std::round(t * 1e4) / 1e4)) << "</text>\n";
  }
  if (0.0 >= y_lo && 0.0 <= y_hi) {
    os << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << fixed(py(0.0)) << "\" y2=\""
       << fixed(py(0.0)) << "\" stroke=\"#888888\"/>\n";
  }
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\""
     << H - T - B << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const long s = s_min + (s_max - s_min) * i / 4;
    os << "<text x=\"" << fixed(px(s)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" "
       << "font-family=\"sans-serif\" font-size=\"11\">" << s << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" "
     << "font-family=\"sans-serif\" font-size=\"12\">training step</text>\n";
  os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"12\" transform=\"rotate(-90 18 " << (T + H - B) / 2 << ")\">"
     << (log_axis ? "G (symlog, linear for |G| &lt; 1)" : "G") << "</text>\n";

  std::size_t k = 0;
  for (const auto& [name, pts] : series) {
    const char* color = kPalette[k % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      os << (i ? " " : "") << fixed(px(pts[i].first)) << ',' << fixed(py(f(pts[i].second)));
    }
    os << "\"/>\n";
    const double ly = T + 16.0 * static_cast<double>(k) + 8.0;
    os << "<line x1=\"" << W - R + 12 << "\" x2=\"" << W - R + 32 << "\" y1=\"" << ly << "\" y2=\""
       << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" "
       << "font-size=\"11\">" << xml_escape(name) << "</text>\n";
    ++k;
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_alignment_csv(const std::vector<AlignmentRecord>& records,
                                 const std::vector<AlignmentRecord>& all_family_records) {
  const bool tot = !records.empty() && records.front().objective == ObjectiveId::TOT;
  const auto lookup = [&](long step, ObjectiveId id) -> const AlignmentRecord* {
    for (const auto& r : all_family_records) {
      if (r.step == step && r.objective == id) return &r;
    }
    return nullptr;
  };

  std::ostringstream os;
  os << "step,g,g_preconditioned,obj_grad_norm,target_grad_norm,n_batches_used,"
        "n_batches_filtered,loss_increased";
  if (tot) os << ",pos_plus_neg,top_mid_bot";
  os << '\n';
  for (const auto& r : records) {
    os << r.step << ',' << format_double(r.g_value) << ',' << format_double(r.g_preconditioned)
       << ',' << format_double(r.obj_grad_norm) << ',' << format_double(r.target_grad_norm) << ','
       << r.n_batches_used << ',' << r.n_batches_filtered << ',' << (r.loss_increased ? 1 : 0);
    if (tot) {
      const auto* pos = lookup(r.step, ObjectiveId::POS);
      const auto* neg = lookup(r.step, ObjectiveId::NEG);
      const auto* top = lookup(r.step, ObjectiveId::TOP);
      const auto* mid = lookup(r.step, ObjectiveId::MID);
      const auto* bot = lookup(r.step, ObjectiveId::BOT);
      os << ',';
      if (pos && neg) os << format_double(pos->g_value + neg->g_value);
      os << ',';
      if (top && mid && bot) os << format_double(top->g_value + mid->g_value + bot->g_value);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace podyn
