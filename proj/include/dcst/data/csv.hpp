#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dcst/data/dataset.hpp"
#include "dcst/diffcore/errors.hpp"

namespace dcst::data {

namespace csv {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// Non-empty lines of a file, each paired with its 1-based line number.
inline std::vector<std::pair<std::size_t, std::string>> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::vector<std::pair<std::size_t, std::string>> lines;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    lines.emplace_back(n, line);
  }
  return lines;
}

/// Parses "YYYY-MM-DD[T ]HH:MM[:SS]" to minutes since the epoch.
inline std::int64_t parse_timestamp(const std::string& s, std::size_t line) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  const int n = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d", &y, &mo, &d, &sep, &h, &mi, &sec);
  if (n < 6 || (sep != 'T' && sep != ' ') || mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59) {
    throw IngestionError("line " + std::to_string(line) + ": invalid timestamp '" + s + "'");
  }
  return minutes_since_epoch(y, static_cast<unsigned>(mo), static_cast<unsigned>(d), h, mi);
}

}  // namespace csv

/// Speeds table: header `timestamp,<id>...`, one row per step. Empty cells are imputed by
/// forward fill; leading gaps take the column mean of observed values.
inline SpeedMatrix read_speeds(const std::filesystem::path& path, std::vector<std::string>* ids_out = nullptr) {
  const auto lines = csv::read_lines(path);
  if (lines.size() < 2) throw IngestionError(path.string() + ": need a header and at least one row");
  const auto header = csv::split_line(lines[0].second);
  if (header.size() < 2) throw IngestionError(path.string() + ": header has no sensor columns");
  const std::vector<std::string> ids(header.begin() + 1, header.end());
  const std::size_t n = ids.size(), steps = lines.size() - 1;

  std::vector<std::vector<std::optional<double>>> cols(n, std::vector<std::optional<double>>(steps));
  std::vector<std::int64_t> stamps(steps);
  for (std::size_t r = 0; r < steps; ++r) {
    const auto& [line_no, text] = lines[r + 1];
    const auto cells = csv::split_line(text);
    if (cells.size() != n + 1) {
      throw IngestionError(path.string() + " line " + std::to_string(line_no) + ": expected " +
                           std::to_string(n + 1) + " cells, found " + std::to_string(cells.size()));
    }
    stamps[r] = csv::parse_timestamp(cells[0], line_no);
    for (std::size_t c = 0; c < n; ++c) {
      if (cells[c + 1].empty()) continue;
      auto v = csv::parse_double(cells[c + 1]);
      if (!v) {
        throw IngestionError(path.string() + " line " + std::to_string(line_no) + ", column '" + ids[c] +
                             "': non-numeric value '" + cells[c + 1] + "'");
      }
      if (*v < 0.0) {
        throw IngestionError(path.string() + " line " + std::to_string(line_no) + ", column '" + ids[c] +
                             "': negative speed");
      }
      cols[c][r] = *v;
    }
  }

  SpeedMatrix m;
  m.values = Array(Shape{n, steps});
  m.start_minutes = stamps[0];
  m.step_minutes = steps > 1 ? static_cast<double>(stamps[1] - stamps[0]) : 5.0;
  if (m.step_minutes <= 0.0) throw IngestionError(path.string() + ": timestamps must increase");
  for (std::size_t c = 0; c < n; ++c) {
    double total = 0.0;
    std::size_t seen = 0;
    for (const auto& v : cols[c]) {
      if (v) {
        total += *v;
        ++seen;
      }
    }
    if (seen == 0) throw IngestionError(path.string() + ": column '" + ids[c] + "' has no observations");
    const double col_mean = total / static_cast<double>(seen);
    std::optional<double> last;
    for (std::size_t r = 0; r < steps; ++r) {
      if (cols[c][r]) last = cols[c][r];
      m.values[c * steps + r] = last ? *last : col_mean;
    }
  }
  if (ids_out) *ids_out = ids;
  return m;
}

inline std::vector<SensorMeta> read_sensors(const std::filesystem::path& path) {
  const auto lines = csv::read_lines(path);
  std::vector<SensorMeta> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& [line_no, text] = lines[i];
    const auto cells = csv::split_line(text);
    if (cells.size() != 3) {
      throw IngestionError(path.string() + " line " + std::to_string(line_no) + ": expected id,x,y");
    }
    auto x = csv::parse_double(cells[1]);
    auto y = csv::parse_double(cells[2]);
    if (!x || !y) {
      if (i == 0) continue;  // header
      throw IngestionError(path.string() + " line " + std::to_string(line_no) + ": non-numeric coordinate");
    }
    out.push_back(SensorMeta{cells[0], *x, *y});
  }
  return out;
}

/// Reads `src,dst,weight` triplets into an N x N matrix indexed by `ids`, symmetrised by
/// taking the larger of the two directions.
inline RoadGraph read_adjacency(const std::filesystem::path& path, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ids.size(); ++i) index.emplace(ids[i], i);
  const std::size_t n = ids.size();
  RoadGraph g = RoadGraph::empty(n);
  const auto lines = csv::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& [line_no, text] = lines[i];
    const auto cells = csv::split_line(text);
    if (cells.size() != 3) {
      throw IngestionError(path.string() + " line " + std::to_string(line_no) + ": expected src,dst,weight");
    }
    auto w = csv::parse_double(cells[2]);
    if (!w) {
      if (i == 0) continue;  // header
      throw IngestionError(path.string() + " line " + std::to_string(line_no) + ": non-numeric weight '" +
                           cells[2] + "'");
    }
    if (*w < 0.0) throw IngestionError(path.string() + " line " + std::to_string(line_no) + ": negative weight");
    auto a = index.find(cells[0]);
    auto b = index.find(cells[1]);
    if (a == index.end() || b == index.end()) {
      throw IngestionError(path.string() + " line " + std::to_string(line_no) + ": unknown sensor id '" +
                           (a == index.end() ? cells[0] : cells[1]) + "'");
    }
    g.adjacency.at(a->second, b->second) = std::max(g.adjacency.at(a->second, b->second), *w);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double w = std::max(g.adjacency.at(i, j), g.adjacency.at(j, i));
      g.adjacency.at(i, j) = w;
      g.adjacency.at(j, i) = w;
    }
  }
  return g;
}

/// Loads the three CSV files. Node order follows the speeds header; the sensors file must
/// list exactly those ids.
inline Dataset load_csv(const std::filesystem::path& speeds_path, const std::filesystem::path& sensors_path,
                        const std::filesystem::path& adjacency_path) {
  Dataset ds;
  std::vector<std::string> ids;
  ds.speeds = read_speeds(speeds_path, &ids);
  const auto sensors = read_sensors(sensors_path);
  std::unordered_map<std::string, const SensorMeta*> by_id;
  for (const auto& s : sensors) {
    if (!by_id.emplace(s.id, &s).second) throw IngestionError(sensors_path.string() + ": duplicate id '" + s.id + "'");
  }
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw IngestionError(speeds_path.string() + ": sensor id '" + id + "' missing from " + sensors_path.string());
    }
    ds.sensors.push_back(*it->second);
  }
  if (sensors.size() != ids.size()) {
    throw IngestionError(sensors_path.string() + ": lists sensors absent from the speeds header");
  }
  ds.graph = read_adjacency(adjacency_path, ids);
  return ds;
}

inline void write_speeds(const std::filesystem::path& path, const SpeedMatrix& m,
                         const std::vector<SensorMeta>& sensors) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "timestamp";
  for (const auto& s : sensors) out << ',' << s.id;
  out << '\n';
  for (std::size_t t = 0; t < m.steps(); ++t) {
    out << format_timestamp(m.start_minutes + static_cast<std::int64_t>(std::llround(t * m.step_minutes)));
    for (std::size_t i = 0; i < m.node_count(); ++i) out << ',' << csv::format_double(m.at(i, t));
    out << '\n';
  }
}

inline void write_sensors(const std::filesystem::path& path, const std::vector<SensorMeta>& sensors) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "id,x,y\n";
  for (const auto& s : sensors) out << s.id << ',' << csv::format_double(s.x) << ',' << csv::format_double(s.y) << '\n';
}

/// Upper-triangle triplets (including self loops).
inline void write_adjacency(const std::filesystem::path& path, const RoadGraph& g,
                            const std::vector<SensorMeta>& sensors) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "src,dst,weight\n";
  const std::size_t n = g.node_count();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double w = g.adjacency.at(i, j);
      if (w != 0.0) out << sensors[i].id << ',' << sensors[j].id << ',' << csv::format_double(w) << '\n';
    }
  }
}

}  // namespace dcst::data
