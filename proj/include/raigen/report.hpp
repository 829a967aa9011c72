#pragma once

// Static HTML rendering of score, ablation and rarity artifacts.
// Heatmaps are raw grids drawn as fixed-size table cells.

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <string>

#include "raigen/data_io.hpp"

namespace raigen {

inline std::string html_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

namespace detail {

inline const char* kStyle =
    "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
    "td,th{padding:2px 8px;border:1px solid #ccc}table.heat td{width:10px;height:10px;padding:0;border:none}"
    ".maps{display:flex;flex-wrap:wrap;gap:12px}.map{font-size:11px}.empty{color:#a00;font-weight:bold}</style>";

inline std::string page(const std::string& title, const std::string& body) {
  return "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" + html_escape(title) + "</title>" + kStyle +
         "</head><body>\n<h1>" + html_escape(title) + "</h1>\n" + body + "</body></html>\n";
}

inline std::string heatmap_table(const json& grid) {
  double hi = 0.0;
  for (const auto& row : grid)
    for (const auto& v : row) hi = std::max(hi, v.get<double>());
  std::ostringstream out;
  out << "<table class=\"heat\">";
  for (const auto& row : grid) {
    out << "<tr>";
    for (const auto& v : row) {
      int level = hi > 0.0 ? static_cast<int>(255.0 * v.get<double>() / hi + 0.5) : 0;
      out << "<td style=\"background:rgb(" << level << "," << level / 3 << ",0)\"></td>";
    }
    out << "</tr>";
  }
  out << "</table>";
  return out.str();
}

inline std::string id_list(const json& ids) {
  std::string out;
  for (const auto& id : ids) {
    if (!out.empty()) out += ", ";
    out += std::to_string(id.get<std::size_t>());
  }
  return out.empty() ? "-" : out;
}

}  // namespace detail

inline std::string render_scores_html(const json& payload) {
  std::ostringstream body;
  body << "<p>Prompt: <b>" << html_escape(payload.value("prompt", std::string())) << "</b>; samples "
       << payload.value("sample_count", 0) << "; coarse k " << payload.value("coarse_k", 0) << "; score gate "
       << fmt(payload.value("gate", 0.0)) << "</p>\n";
  const json& selected = payload.at("selected");
  if (selected.empty()) {
    body << "<p class=\"empty\">EMPTY: no neuron passed the percentile gate.</p>\n";
  } else {
    body << "<table><tr><th>#</th><th>neuron</th><th>s</th><th>&nu;</th><th>d</th><th>top samples</th></tr>\n";
    std::size_t rank = 1;
    for (const auto& n : selected) {
      std::string ids;
      for (const auto& t : n.at("top_samples")) {
        if (!ids.empty()) ids += ", ";
        ids += html_escape(t.at("sample_id").get<std::string>());
      }
      body << "<tr><td>" << rank++ << "</td><td>" << n.at("id").get<std::size_t>() << "</td><td>"
           << fmt(n.at("score").get<double>()) << "</td><td>" << fmt(n.at("nu").get<double>()) << "</td><td>"
           << fmt(n.at("d").get<double>(), 6) << "</td><td>" << ids << "</td></tr>\n";
    }
    body << "</table>\n";
    for (const auto& n : selected) {
      body << "<h2>Neuron " << n.at("id").get<std::size_t>() << "</h2>\n<div class=\"maps\">";
      for (const auto& t : n.at("top_samples")) {
        body << "<div class=\"map\">" << detail::heatmap_table(t.at("heatmap")) << "<div>"
             << html_escape(t.at("sample_id").get<std::string>()) << " (" << fmt(t.at("activation").get<double>())
             << ")</div></div>";
      }
      body << "</div>\n";
    }
  }
  return detail::page("Minority neurons", body.str());
}

inline std::string render_ablation_html(const json& payload) {
  std::ostringstream body;
  for (const auto& run : payload.at("runs")) {
    body << "<h2>coarse k = " << run.at("coarse_k").get<unsigned>() << "</h2>\n";
    if (run.at("empty").get<bool>()) body << "<p class=\"empty\">EMPTY: no candidate passed the gate.</p>\n";
    body << "<table><tr><th>ranking</th><th>neurons</th></tr>"
         << "<tr><td>frequency only (ascending &nu;)</td><td>" << detail::id_list(run.at("frequency_only"))
         << "</td></tr><tr><td>distinctiveness only (descending d)</td><td>"
         << detail::id_list(run.at("distinctiveness_only")) << "</td></tr><tr><td>combined (descending s)</td><td>"
         << detail::id_list(run.at("combined")) << "</td></tr></table>\n";
    const json& o = run.at("overlap");
    body << "<p>Jaccard overlap: frequency/combined " << fmt(o.at("frequency_vs_combined").get<double>())
         << ", distinctiveness/combined " << fmt(o.at("distinctiveness_vs_combined").get<double>())
         << ", frequency/distinctiveness " << fmt(o.at("frequency_vs_distinctiveness").get<double>()) << "</p>\n";
  }
  return detail::page("Minority score ablation", body.str());
}

inline std::string render_rarity_html(const json& payload) {
  std::ostringstream body;
  body << "<table><tr><th>q</th><th>P(rare | least-active)</th><th>5%-95%</th><th>P(rare | random)</th></tr>\n";
  for (const auto& q : payload.at("quantiles")) {
    const json& iv = q.at("p_least_active_interval");
    body << "<tr><td>" << fmt(q.at("q").get<double>(), 2) << "</td><td>"
         << fmt(q.at("mean_p_least_active").get<double>()) << "</td><td>" << fmt(iv[0].get<double>()) << " - "
         << fmt(iv[1].get<double>()) << "</td><td>" << fmt(q.at("mean_p_random_baseline").get<double>())
         << "</td></tr>\n";
  }
  body << "</table>\n<p>Mean Spearman &rho; between latent firing rate and matched feature frequency: "
       << fmt(payload.at("mean_spearman_rho").get<double>()) << " over " << payload.at("seeds").size()
       << " seeds</p>\n";
  return detail::page("Toy rarity validation", body.str());
}

/// Renders any report-bearing artifact by kind.
inline std::string render_artifact_html(const RunArtifact& a) {
  if (a.kind == ArtifactKind::Scores) return render_scores_html(a.payload);
  require(a.kind == ArtifactKind::Report, ErrorKind::Format, "artifact kind cannot be rendered");
  const std::string type = a.payload.value("report_type", std::string());
  if (type == "rarity") return render_rarity_html(a.payload);
  if (type == "ablation") return render_ablation_html(a.payload);
  fail(ErrorKind::Format, "unknown report_type '" + type + "'");
}

}  // namespace raigen
