#pragma once

// Measurement datasets and their single-file container.
//
// File layout (all numbers little-endian):
//   "NVTWIN-DS 1\n"
//   one line of JSON: kind, axes and channels (names, units, lengths),
//     metadata, fits, aborted flag, payload_bytes
//   payload: float64 arrays in header order: every axis, then every
//     channel's values followed by its sigma when present
//   "\nCRC32 <8 hex digits>\n" over every preceding byte
//
// Saves go to a temporary file in the target directory that is flushed
// and renamed into place, so a reader sees either the old file or the
// complete new one.

#include "nvtwin/analysis.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvtwin::data {

using Json = nlohmann::json;

inline constexpr const char* kMagic = "NVTWIN-DS";
inline constexpr int kVersion = 1;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class ChecksumError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

enum class Kind { scan2d, spectrum, time_trace, histogram, sweep };

std::string to_string(Kind k);
Kind kind_from_string(const std::string& s);

struct Axis {
  std::string name;
  std::string unit;
  std::vector<double> values;
  bool operator==(const Axis& o) const;
};

/// One measured quantity over the axis grid. For two axes the layout is
/// row-major with the first axis fastest: index = iy * nx + ix.
struct Channel {
  std::string name;
  std::string unit;
  std::vector<double> values;
  std::vector<double> sigma;  // empty or same length as values
  bool operator==(const Channel& o) const;
};

struct Dataset {
  Kind kind = Kind::sweep;
  std::vector<Axis> axes;
  std::vector<Channel> channels;
  Json metadata = Json::object();
  std::vector<analysis::FitResult> fits;
  bool aborted = false;

  std::size_t point_count() const;
  void validate() const;

  const Channel& channel(const std::string& name) const;
  Channel& channel(const std::string& name);
  const Axis& axis(const std::string& name) const;

  /// Values compare bitwise, so NaN placeholders compare equal.
  bool operator==(const Dataset& o) const;
};

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
/// Header only (no payload read), e.g. for listings.
Json read_header(const std::filesystem::path& path);

/// Writes a dataset whose channel values arrive incrementally, keeping
/// only a bounded buffer in memory. Channels are filled in declaration
/// order; values not written by finish() are padded with NaN.
class StreamWriter {
 public:
  struct ChannelSpec {
    std::string name;
    std::string unit;
  };

  StreamWriter(std::filesystem::path path, Kind kind, std::vector<Axis> axes, std::vector<ChannelSpec> channels);
  ~StreamWriter();
  StreamWriter(const StreamWriter&) = delete;
  StreamWriter& operator=(const StreamWriter&) = delete;

  void append(std::size_t channel, std::span<const double> values);
  std::size_t written(std::size_t channel) const;
  void finish(const Json& metadata, const std::vector<analysis::FitResult>& fits, bool aborted);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace nvtwin::data
