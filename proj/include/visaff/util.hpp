#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace visaff {

// Order-stable pairwise reduction; keeps sums reproducible regardless of how
// callers might later parallelize over halves.
double pairwise_sum(std::span<const double> values);

inline double mean_of(std::span<const double> values) {
    if (values.empty()) return 0.0;
    return pairwise_sum(values) / static_cast<double>(values.size());
}

// Population covariance (1/n normalization); the risk-decomposition identity
// is exact only under this convention.
double covariance(std::span<const double> x, std::span<const double> y);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::string read_text_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

std::string to_lower(std::string s);
std::vector<std::string> split_lines(const std::string& text);

} // namespace visaff
