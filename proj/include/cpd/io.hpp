#pragma once

// Plain-text point sets: one point per line, whitespace-separated
// coordinates, '#' starts a comment.

#include <cpd/types.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace cpd {

inline PointSet parse_pointset(std::istream& in, const std::string& origin = "<stream>") {
  std::vector<double> values;
  Index dim = 0;
  Index rows = 0;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream tokens(line);
    std::string tok;
    Index cols = 0;
    while (tokens >> tok) {
      double v = 0.0;
      const char* first = tok.data();
      const char* last = tok.data() + tok.size();
      if (*first == '+') ++first;
      const auto res = std::from_chars(first, last, v);
      if (res.ec != std::errc() || res.ptr != last) {
        throw Error(ErrorCode::kParse, origin + ":" + std::to_string(lineno) + ": non-numeric token '" + tok + "'");
      }
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kParse, origin + ":" + std::to_string(lineno) + ": non-finite value '" + tok + "'");
      }
      values.push_back(v);
      ++cols;
    }
    if (cols == 0) continue;
    if (dim == 0) dim = cols;
    if (cols != dim) {
      throw Error(ErrorCode::kParse, origin + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                                         " columns, found " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw Error(ErrorCode::kParse, origin + ": no points");
  Matrix m(rows, dim);
  for (Index i = 0; i < rows; ++i)
    for (Index d = 0; d < dim; ++d) m(i, d) = values[static_cast<size_t>(i * dim + d)];
  return PointSet(m);
}

inline PointSet load_pointset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path + "'");
  return parse_pointset(in, path);
}

inline void write_pointset(std::ostream& out, const Matrix& m) {
  out << std::setprecision(17);
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index d = 0; d < m.cols(); ++d) {
      if (d > 0) out << ' ';
      out << m(i, d);
    }
    out << '\n';
  }
}

inline void save_pointset(const PointSet& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path + "'");
  write_pointset(out, p.matrix());
  if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path + "'");
  out << text;
}

}  // namespace cpd
