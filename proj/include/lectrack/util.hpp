#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lectrack {

// Malformed or inconsistent input data (corpus files, labels, tracker output).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or command-line usage; the CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

// splitmix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0);

// Warnings go to stderr; the counter lets tests observe them.
void warn(std::string_view message);
std::size_t warning_count();
void set_quiet_warnings(bool quiet);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace lectrack
