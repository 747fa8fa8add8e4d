#pragma once

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "freshness/ctmc.hpp"
#include "freshness/errors.hpp"
#include "freshness/estimators.hpp"

namespace freshness {

// All numeric output carries 9 significant digits.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string json_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 2);
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof(buf), "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out;
}

// Numbers go into JSON bare and into CSV as-is; text gets quoted in JSON.
struct Cell {
  std::string text;
  bool is_number = false;
};

inline Cell num_cell(double v) { return {format_number(v), true}; }
inline Cell int_cell(long v) { return {std::to_string(v), true}; }
inline Cell text_cell(std::string s) { return {std::move(s), false}; }

struct OutputTable {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add_row(std::vector<Cell> cells) {
    if (cells.size() != columns.size())
      throw ParseError("row width does not match the column count");
    rows.push_back(std::move(cells));
  }

  std::string to_csv() const {
    std::ostringstream out;
    for (size_t c = 0; c < columns.size(); ++c)
      out << (c ? "," : "") << columns[c];
    out << '\n';
    for (const auto& row : rows) {
      for (size_t c = 0; c < row.size(); ++c)
        out << (c ? "," : "") << row[c].text;
      out << '\n';
    }
    return out.str();
  }

  std::string to_json() const {
    std::ostringstream out;
    out << "[\n";
    for (size_t r = 0; r < rows.size(); ++r) {
      out << "  {";
      for (size_t c = 0; c < columns.size(); ++c) {
        out << (c ? ", " : "") << '"' << json_escape(columns[c]) << "\": ";
        if (!rows[r][c].is_number)
          out << '"' << json_escape(rows[r][c].text) << '"';
        else if (rows[r][c].text == "nan")
          out << "null";  // JSON has no literal for missing numbers
        else
          out << rows[r][c].text;
      }
      out << (r + 1 < rows.size() ? "},\n" : "}\n");
    }
    out << "]\n";
    return out.str();
  }

  std::string render(const std::string& format) const {
    if (format == "csv") return to_csv();
    if (format == "json") return to_json();
    throw ParseError("unknown output format: " + format);
  }
};

// Chain files: {"states": S, "rates": [[i, j, rate], ...], "label": "..."}
// with 1-indexed state pairs.
inline Ctmc parse_chain(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("chain document must be an object");
  if (!doc.contains("states") || !doc["states"].is_number_integer())
    throw ParseError("chain needs an integer \"states\" field");
  int n = doc["states"].get<int>();
  if (n < 2) throw ParseError("chain needs at least two states");
  if (!doc.contains("rates") || !doc["rates"].is_array())
    throw ParseError("chain needs a \"rates\" array of [i, j, rate] triples");

  std::vector<RateEntry> entries;
  std::set<std::pair<int, int>> seen;
  int idx = 0;
  for (const auto& item : doc["rates"]) {
    std::string where = "rates[" + std::to_string(idx++) + "]";
    if (!item.is_array() || item.size() != 3)
      throw ParseError(where + ": expected an [i, j, rate] triple");
    if (!item[0].is_number_integer() || !item[1].is_number_integer())
      throw ParseError(where + ": state indices must be integers");
    int i = item[0].get<int>(), j = item[1].get<int>();
    if (i < 1 || i > n || j < 1 || j > n)
      throw ParseError(where + ": state index out of range 1.." +
                       std::to_string(n));
    if (i == j) throw ParseError(where + ": self rates are not allowed");
    if (!item[2].is_number())
      throw ParseError(where + ": rate must be a number");
    double rate = item[2].get<double>();
    if (!(rate > 0.0) || !std::isfinite(rate))
      throw ParseError(where + ": rate must be positive and finite");
    if (!seen.insert({i, j}).second)
      throw ParseError(where + ": duplicate rate for this state pair");
    entries.push_back({i - 1, j - 1, rate});
  }

  std::string label;
  if (doc.contains("label")) {
    if (!doc["label"].is_string())
      throw ParseError("\"label\" must be a string");
    label = doc["label"].get<std::string>();
  }
  return build_ctmc(n, entries, std::move(label));
}

inline Ctmc load_chain(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open chain file: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
  return parse_chain(doc);
}

// Comma-separated rate lists, e.g. "0.5,2,1".
inline std::vector<double> parse_number_list(const std::string& text,
                                             bool allow_inf = false) {
  std::vector<double> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    size_t a = item.find_first_not_of(" \t");
    if (a == std::string::npos) throw ParseError("empty entry in list");
    size_t b = item.find_last_not_of(" \t");
    item = item.substr(a, b - a + 1);
    if (allow_inf && (item == "inf" || item == "Inf")) {
      out.push_back(kInf);
      continue;
    }
    try {
      size_t used = 0;
      double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ParseError("not a number: \"" + item + "\"");
    }
  }
  if (out.empty()) throw ParseError("empty list");
  return out;
}

inline EstimatorKind parse_estimator(const std::string& name) {
  if (name == "martingale") return EstimatorKind::Martingale;
  if (name == "tau-map") return EstimatorKind::TauMap;
  if (name == "p-map") return EstimatorKind::PMap;
  throw ParseError("unknown estimator: " + name +
                   " (expected martingale, tau-map, or p-map)");
}

inline std::string estimator_name(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::Martingale: return "martingale";
    case EstimatorKind::TauMap: return "tau-map";
    case EstimatorKind::PMap: return "p-map";
  }
  return "unknown";
}

// Empty path or "-" means stdout.
inline void write_output(const std::string& path, const std::string& content,
                         std::ostream& fallback = std::cout) {
  if (path.empty() || path == "-") {
    fallback << content;
    return;
  }
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open output file: " + path);
  out << content;
}

}  // namespace freshness
