#include "sinan/common.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <system_error>

#include "sinan/allocation.hpp"

namespace sinan {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r'))
    text.remove_suffix(1);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("not a number: '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(text.substr(start));
      break;
    }
    out.emplace_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double valid_fraction,
                                                                            std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, 0x5917);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_valid = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(n)));
  if (n >= 2) n_valid = std::clamp<std::size_t>(n_valid, 1, n - 1);
  else n_valid = 0;
  std::vector<std::size_t> valid(idx.begin(), idx.begin() + n_valid);
  std::vector<std::size_t> train(idx.begin() + n_valid, idx.end());
  return {train, valid};
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot write " + tmp);
    out << contents;
    out.flush();
    if (!out) throw RuntimeError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw RuntimeError("cannot rename " + tmp + " to " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

AllocationVector AllocationVector::from_cores(const std::vector<double>& cores) {
  std::vector<int> t;
  t.reserve(cores.size());
  for (double c : cores) t.push_back(quantize_tenths(c));
  return AllocationVector(std::move(t));
}

std::vector<double> AllocationVector::as_cores() const {
  std::vector<double> out;
  out.reserve(tenths_.size());
  for (int t : tenths_) out.push_back(t * kCpuQuantum);
  return out;
}

double AllocationVector::total_cores() const { return total_tenths() * kCpuQuantum; }

int AllocationVector::total_tenths() const {
  int s = 0;
  for (int t : tenths_) s += t;
  return s;
}

int quantize_tenths(double cores) { return static_cast<int>(std::lround(cores * 10.0)); }

int scale_tenths(int tenths, double factor) {
  int scaled = static_cast<int>(std::lround(tenths * factor));
  if (factor > 1.0 && scaled <= tenths) scaled = tenths + 1;
  if (factor < 1.0 && scaled >= tenths) scaled = tenths - 1;
  return scaled;
}

}  // namespace sinan
