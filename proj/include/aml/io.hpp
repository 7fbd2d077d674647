#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aml/error.hpp"
#include "aml/matrix.hpp"

namespace aml {

using json = nlohmann::json;

// ---- logging -----------------------------------------------------------------

using LogSink = std::function<void(const std::string&)>;

namespace detail {
inline LogSink& log_sink() {
  static LogSink sink = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
  return sink;
}
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Replace the log destination; returns the previous sink.
inline LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(detail::log_mutex());
  auto prev = std::move(detail::log_sink());
  detail::log_sink() = std::move(sink);
  return prev;
}

/// Writes "HH:MM:SS message".
inline void log_line(const std::string& message) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%H:%M:%S") << ' ' << message;
  std::lock_guard lock(detail::log_mutex());
  if (detail::log_sink()) detail::log_sink()(os.str());
}

// ---- numbers -------------------------------------------------------------------

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ---- files ---------------------------------------------------------------------

/// Writes to a temporary sibling and renames, so readers never see a partial file.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

inline json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// ---- CSV -----------------------------------------------------------------------

struct Table {
  std::vector<std::string> columns;
  Matrix rows;
};

inline std::string to_csv(const std::vector<std::string>& columns, const Matrix& m) {
  if (!columns.empty() && columns.size() != m.cols() && !(m.rows() == 0))
    throw ContractError("to_csv: header has " + std::to_string(columns.size()) + " columns, data has " +
                        std::to_string(m.cols()));
  std::string out;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (c) out += ',';
    out += columns[c];
  }
  out += '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) out += ',';
      out += format_double(m(r, c));
    }
    out += '\n';
  }
  return out;
}

inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& columns, const Matrix& m) {
  write_text_atomic(path, to_csv(columns, m));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline Table read_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  Table t;
  if (!std::getline(in, line)) throw IoError("empty CSV file: " + path.string());
  t.columns = split_csv_line(line);
  std::vector<double> data;
  std::size_t nrows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.columns.size())
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.columns.size()) +
                    " fields");
    for (const auto& cell : cells) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0')
        throw IoError(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
      data.push_back(v);
    }
    ++nrows;
  }
  t.rows = Matrix(nrows, t.columns.size(), std::move(data));
  return t;
}

}  // namespace aml
