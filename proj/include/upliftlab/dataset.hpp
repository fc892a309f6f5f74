#pragma once

// Observation containers shared by the generator, trainers and metrics, plus
// the CSV interchange format: header `x0..x{d-1},t,y[,p0..pT]`, one row per
// observation. The p-columns carry ground-truth response probabilities and
// are optional.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "upliftlab/matrix.hpp"

namespace upliftlab {

struct ObservationBatch {
  Matrix covariates;            // N x d
  std::vector<int> treatments;  // arm index, 0 = control
  std::vector<int> outcomes;    // binary
  Matrix true_probs;            // N x num_arms when known, else 0 x 0
  int period = 0;

  std::size_t size() const { return covariates.rows; }
  std::size_t dim() const { return covariates.cols; }
  bool has_true_probs() const { return true_probs.rows > 0; }

  void validate(int num_arms) const {
    if (treatments.size() != size() || outcomes.size() != size())
      throw std::invalid_argument("ObservationBatch: column lengths disagree");
    if (has_true_probs() &&
        (true_probs.rows != size() || true_probs.cols != static_cast<std::size_t>(num_arms)))
      throw std::invalid_argument("ObservationBatch: true_probs shape mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      if (treatments[i] < 0 || treatments[i] >= num_arms)
        throw std::invalid_argument("ObservationBatch: treatment out of range at row " +
                                    std::to_string(i));
      if (outcomes[i] != 0 && outcomes[i] != 1)
        throw std::invalid_argument("ObservationBatch: non-binary outcome at row " +
                                    std::to_string(i));
    }
  }

  ObservationBatch subset(const std::vector<std::size_t>& idx) const {
    ObservationBatch out;
    out.covariates = select_rows(covariates, idx);
    out.treatments.reserve(idx.size());
    out.outcomes.reserve(idx.size());
    for (std::size_t i : idx) {
      if (i >= size()) throw std::out_of_range("ObservationBatch::subset: index out of range");
      out.treatments.push_back(treatments[i]);
      out.outcomes.push_back(outcomes[i]);
    }
    if (has_true_probs()) out.true_probs = select_rows(true_probs, idx);
    out.period = period;
    return out;
  }

  static ObservationBatch concat(const ObservationBatch& a, const ObservationBatch& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    if (a.dim() != b.dim())
      throw std::invalid_argument("ObservationBatch::concat: dimension mismatch");
    if (a.has_true_probs() != b.has_true_probs())
      throw std::invalid_argument("ObservationBatch::concat: true_probs presence differs");
    ObservationBatch out;
    out.covariates = Matrix(a.size() + b.size(), a.dim());
    std::copy(a.covariates.data.begin(), a.covariates.data.end(), out.covariates.data.begin());
    std::copy(b.covariates.data.begin(), b.covariates.data.end(),
              out.covariates.data.begin() + static_cast<std::ptrdiff_t>(a.covariates.size()));
    out.treatments = a.treatments;
    out.treatments.insert(out.treatments.end(), b.treatments.begin(), b.treatments.end());
    out.outcomes = a.outcomes;
    out.outcomes.insert(out.outcomes.end(), b.outcomes.begin(), b.outcomes.end());
    if (a.has_true_probs()) {
      out.true_probs = Matrix(a.size() + b.size(), a.true_probs.cols);
      std::copy(a.true_probs.data.begin(), a.true_probs.data.end(), out.true_probs.data.begin());
      std::copy(b.true_probs.data.begin(), b.true_probs.data.end(),
                out.true_probs.data.begin() + static_cast<std::ptrdiff_t>(a.true_probs.size()));
    }
    out.period = a.period;
    return out;
  }
};

struct PeriodDataset {
  ObservationBatch train;  // selection-biased assignment
  ObservationBatch test;   // randomized assignment
  bool rct_test = true;
  int period = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no, const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("line " + std::to_string(line_no) + ": bad " + what + " value '" +
                             s + "'");
  }
}

inline long parse_int(const std::string& s, std::size_t line_no, const char* what) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("line " + std::to_string(line_no) + ": bad " + what + " value '" +
                             s + "'");
  }
}

}  // namespace detail

inline void save_csv(const ObservationBatch& batch, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_csv: cannot open " + path);
  for (std::size_t d = 0; d < batch.dim(); ++d) out << "x" << d << ",";
  out << "t,y";
  if (batch.has_true_probs())
    for (std::size_t t = 0; t < batch.true_probs.cols; ++t) out << ",p" << t;
  out << "\n";
  char buf[32];
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t d = 0; d < batch.dim(); ++d) {
      std::snprintf(buf, sizeof(buf), "%.17g", batch.covariates(i, d));
      out << buf << ",";
    }
    out << batch.treatments[i] << "," << batch.outcomes[i];
    if (batch.has_true_probs())
      for (std::size_t t = 0; t < batch.true_probs.cols; ++t) {
        std::snprintf(buf, sizeof(buf), "%.17g", batch.true_probs(i, t));
        out << "," << buf;
      }
    out << "\n";
  }
  if (!out) throw std::runtime_error("save_csv: write failed for " + path);
}

inline ObservationBatch load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_csv: empty file " + path);
  const std::vector<std::string> header = detail::split_csv_line(line);

  std::size_t dim = 0;
  while (dim < header.size() && header[dim] == "x" + std::to_string(dim)) ++dim;
  if (dim == 0 || dim + 2 > header.size() || header[dim] != "t" || header[dim + 1] != "y")
    throw std::runtime_error("load_csv: header must be x0..x{d-1},t,y[,p0..pT]");
  std::size_t num_probs = 0;
  for (std::size_t c = dim + 2; c < header.size(); ++c) {
    if (header[c] != "p" + std::to_string(num_probs))
      throw std::runtime_error("load_csv: unexpected header column '" + header[c] + "'");
    ++num_probs;
  }

  std::vector<double> xs, ps;
  std::vector<int> ts, ys;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields, got " +
                               std::to_string(cells.size()));
    for (std::size_t d = 0; d < dim; ++d)
      xs.push_back(detail::parse_double(cells[d], line_no, "covariate"));
    const long t = detail::parse_int(cells[dim], line_no, "treatment");
    if (t < 0 || (num_probs > 0 && t >= static_cast<long>(num_probs)))
      throw std::runtime_error("line " + std::to_string(line_no) + ": treatment out of range");
    ts.push_back(static_cast<int>(t));
    const long y = detail::parse_int(cells[dim + 1], line_no, "outcome");
    if (y != 0 && y != 1)
      throw std::runtime_error("line " + std::to_string(line_no) + ": outcome must be 0 or 1");
    ys.push_back(static_cast<int>(y));
    for (std::size_t c = 0; c < num_probs; ++c)
      ps.push_back(detail::parse_double(cells[dim + 2 + c], line_no, "probability"));
  }

  ObservationBatch batch;
  const std::size_t n = ts.size();
  batch.covariates = Matrix(n, dim);
  batch.covariates.data = std::move(xs);
  batch.treatments = std::move(ts);
  batch.outcomes = std::move(ys);
  if (num_probs > 0) {
    batch.true_probs = Matrix(n, num_probs);
    batch.true_probs.data = std::move(ps);
  }
  return batch;
}

}  // namespace upliftlab
