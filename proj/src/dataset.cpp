#include "nvtwin/dataset.hpp"

#include "nvtwin/config.hpp"

#include <zlib.h>

#include <atomic>
#include <bit>
#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace nvtwin::data {

namespace {

constexpr std::size_t kTrailerSize = 16;  // "\nCRC32 xxxxxxxx\n"

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

void to_le(double v, char* out) {
  auto u = std::bit_cast<std::uint64_t>(v);
  for (int k = 0; k < 8; ++k) out[k] = static_cast<char>((u >> (8 * k)) & 0xff);
}

double from_le(const char* in) {
  std::uint64_t u = 0;
  for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[k])) << (8 * k);
  return std::bit_cast<double>(u);
}

std::string encode(std::span<const double> v) {
  std::string out(v.size() * 8, '\0');
  for (std::size_t k = 0; k < v.size(); ++k) to_le(v[k], out.data() + 8 * k);
  return out;
}

std::uint32_t crc_update(std::uint32_t crc, const char* data, std::size_t n) {
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = static_cast<std::uint32_t>(::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk));
    data += chunk;
    n -= chunk;
  }
  return crc;
}

std::string trailer(std::uint32_t crc) {
  char buf[kTrailerSize + 1];
  std::snprintf(buf, sizeof buf, "\nCRC32 %08x\n", crc);
  return std::string(buf, kTrailerSize);
}

std::string dump_line(const Json& j) { return j.dump(-1, ' ', false, Json::error_handler_t::replace); }

// Temp file next to the target, renamed over it on commit.
class AtomicFile {
 public:
  explicit AtomicFile(const std::filesystem::path& target) : target_(target) {
    static std::atomic<unsigned> counter{0};
    const auto dir = target.has_parent_path() ? target.parent_path() : std::filesystem::path(".");
    temp_ = dir / ("." + target.filename().string() + ".tmp-" + std::to_string(::getpid()) + "-" +
                   std::to_string(counter++));
    fd_ = ::open(temp_.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) throw DatasetError("cannot create " + temp_.string() + ": " + std::strerror(errno));
  }
  ~AtomicFile() {
    if (fd_ >= 0) ::close(fd_);
    if (!committed_) ::unlink(temp_.c_str());
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;

  void write(const char* data, std::size_t n) {
    crc_ = crc_update(crc_, data, n);
    while (n > 0) {
      const ssize_t w = ::write(fd_, data, n);
      if (w < 0) {
        if (errno == EINTR) continue;
        throw DatasetError("write failed for " + temp_.string() + ": " + std::strerror(errno));
      }
      data += w;
      n -= static_cast<std::size_t>(w);
    }
  }
  void write(const std::string& s) { write(s.data(), s.size()); }

  void commit() {
    const std::string t = trailer(crc_);
    write(t);
    if (::fsync(fd_) != 0) throw DatasetError("fsync failed: " + std::string(std::strerror(errno)));
    ::close(fd_);
    fd_ = -1;
    if (::rename(temp_.c_str(), target_.c_str()) != 0)
      throw DatasetError("cannot rename onto " + target_.string() + ": " + std::strerror(errno));
    committed_ = true;
    const auto dir = target_.has_parent_path() ? target_.parent_path() : std::filesystem::path(".");
    const int dfd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
    if (dfd >= 0) {
      ::fsync(dfd);
      ::close(dfd);
    }
  }

 private:
  std::filesystem::path target_;
  std::filesystem::path temp_;
  int fd_ = -1;
  bool committed_ = false;
  std::uint32_t crc_ = 0;
};

std::size_t grid_size(const std::vector<Axis>& axes) {
  std::size_t n = 1;
  for (const auto& a : axes) n *= a.values.size();
  return axes.empty() ? 0 : n;
}

Json header_json(Kind kind, const std::vector<Axis>& axes, const Json& channels, const Json& metadata,
                 const std::vector<analysis::FitResult>& fits, bool aborted, std::size_t payload_bytes) {
  Json ax = Json::array();
  for (const auto& a : axes) ax.push_back({{"name", a.name}, {"unit", a.unit}, {"length", a.values.size()}});
  Json fj = Json::array();
  for (const auto& f : fits) fj.push_back(config::to_json(f));
  return {{"kind", to_string(kind)}, {"axes", ax},   {"channels", channels},          {"metadata", metadata},
          {"fits", fj},              {"aborted", aborted}, {"payload_bytes", payload_bytes}};
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Returns the offset just past the magic line.
std::size_t check_magic(const std::string& head, const std::filesystem::path& path) {
  const std::string prefix = std::string(kMagic) + " ";
  if (head.compare(0, prefix.size(), prefix) != 0) throw DatasetError(path.string() + ": not a dataset file");
  const auto nl = head.find('\n');
  if (nl == std::string::npos) throw ChecksumError(path.string() + ": truncated header");
  const std::string version = head.substr(prefix.size(), nl - prefix.size());
  if (version != std::to_string(kVersion))
    throw VersionError(path.string() + ": unsupported dataset version '" + version + "' (expected " +
                       std::to_string(kVersion) + ")");
  return nl + 1;
}

Json parse_header(const std::string& line, const std::filesystem::path& path) {
  try {
    return Json::parse(line);
  } catch (const Json::exception& e) {
    throw DatasetError(path.string() + ": malformed header: " + e.what());
  }
}

}  // namespace

std::string to_string(Kind k) {
  switch (k) {
    case Kind::scan2d:
      return "scan2d";
    case Kind::spectrum:
      return "spectrum";
    case Kind::time_trace:
      return "time_trace";
    case Kind::histogram:
      return "histogram";
    case Kind::sweep:
      return "sweep";
  }
  return "sweep";
}

Kind kind_from_string(const std::string& s) {
  for (auto k : {Kind::scan2d, Kind::spectrum, Kind::time_trace, Kind::histogram, Kind::sweep})
    if (to_string(k) == s) return k;
  throw DatasetError("unknown dataset kind '" + s + "'");
}

bool Axis::operator==(const Axis& o) const { return name == o.name && unit == o.unit && same_bits(values, o.values); }

bool Channel::operator==(const Channel& o) const {
  return name == o.name && unit == o.unit && same_bits(values, o.values) && same_bits(sigma, o.sigma);
}

std::size_t Dataset::point_count() const { return grid_size(axes); }

void Dataset::validate() const {
  if (axes.empty()) throw DatasetError("dataset needs at least one axis");
  if (kind == Kind::scan2d && axes.size() != 2) throw DatasetError("scan2d datasets have exactly two axes");
  if (kind != Kind::scan2d && axes.size() != 1) throw DatasetError(to_string(kind) + " datasets have one axis");
  const std::size_t n = point_count();
  for (const auto& c : channels) {
    if (c.values.size() != n)
      throw DatasetError("channel '" + c.name + "' has " + std::to_string(c.values.size()) + " values, axes need " +
                         std::to_string(n));
    if (!c.sigma.empty() && c.sigma.size() != n) throw DatasetError("channel '" + c.name + "' sigma length mismatch");
  }
  if (!metadata.is_object()) throw DatasetError("metadata must be an object");
}

const Channel& Dataset::channel(const std::string& name) const {
  for (const auto& c : channels)
    if (c.name == name) return c;
  throw DatasetError("no channel '" + name + "'");
}

Channel& Dataset::channel(const std::string& name) {
  return const_cast<Channel&>(static_cast<const Dataset&>(*this).channel(name));
}

const Axis& Dataset::axis(const std::string& name) const {
  for (const auto& a : axes)
    if (a.name == name) return a;
  throw DatasetError("no axis '" + name + "'");
}

bool Dataset::operator==(const Dataset& o) const {
  return kind == o.kind && axes == o.axes && channels == o.channels && metadata == o.metadata && fits == o.fits &&
         aborted == o.aborted;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::size_t payload = 0;
  Json ch = Json::array();
  for (const auto& a : ds.axes) payload += 8 * a.values.size();
  for (const auto& c : ds.channels) {
    ch.push_back({{"name", c.name}, {"unit", c.unit}, {"length", c.values.size()}, {"sigma", !c.sigma.empty()}});
    payload += 8 * (c.values.size() + c.sigma.size());
  }
  AtomicFile f(path);
  f.write(std::string(kMagic) + " " + std::to_string(kVersion) + "\n");
  f.write(dump_line(header_json(ds.kind, ds.axes, ch, ds.metadata, ds.fits, ds.aborted, payload)) + "\n");
  for (const auto& a : ds.axes) f.write(encode(a.values));
  for (const auto& c : ds.channels) {
    f.write(encode(c.values));
    if (!c.sigma.empty()) f.write(encode(c.sigma));
  }
  f.commit();
}

Json read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string magic, header;
  std::getline(in, magic);
  check_magic(magic + "\n", path);
  if (!std::getline(in, header)) throw ChecksumError(path.string() + ": truncated header");
  return parse_header(header, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  const std::size_t body = check_magic(bytes.substr(0, std::min<std::size_t>(bytes.size(), 64)), path);

  if (bytes.size() < body + kTrailerSize) throw ChecksumError(path.string() + ": truncated file");
  const std::size_t end = bytes.size() - kTrailerSize;
  const std::string tail = bytes.substr(end);
  unsigned stored = 0;
  if (tail.compare(0, 7, "\nCRC32 ") != 0 || tail.back() != '\n' ||
      std::sscanf(tail.c_str() + 7, "%8x", &stored) != 1)
    throw ChecksumError(path.string() + ": missing checksum trailer (truncated file?)");
  if (crc_update(0, bytes.data(), end) != stored) throw ChecksumError(path.string() + ": checksum mismatch");

  const auto nl = bytes.find('\n', body);
  if (nl == std::string::npos || nl >= end) throw DatasetError(path.string() + ": missing header");
  const Json h = parse_header(bytes.substr(body, nl - body), path);

  Dataset ds;
  std::size_t offset = nl + 1;
  auto take = [&](std::size_t n) {
    if (offset + 8 * n > end) throw DatasetError(path.string() + ": payload shorter than header declares");
    std::vector<double> v(n);
    for (std::size_t k = 0; k < n; ++k) v[k] = from_le(bytes.data() + offset + 8 * k);
    offset += 8 * n;
    return v;
  };
  try {
    ds.kind = kind_from_string(h.at("kind").get<std::string>());
    for (const auto& a : h.at("axes"))
      ds.axes.push_back({a.at("name").get<std::string>(), a.at("unit").get<std::string>(),
                         take(a.at("length").get<std::size_t>())});
    for (const auto& c : h.at("channels")) {
      Channel ch{c.at("name").get<std::string>(), c.at("unit").get<std::string>(), {}, {}};
      const auto n = c.at("length").get<std::size_t>();
      ch.values = take(n);
      if (c.at("sigma").get<bool>()) ch.sigma = take(n);
      ds.channels.push_back(std::move(ch));
    }
    ds.metadata = h.at("metadata");
    for (const auto& f : h.at("fits")) ds.fits.push_back(config::fit_from_json(f));
    ds.aborted = h.at("aborted").get<bool>();
    if (h.at("payload_bytes").get<std::size_t>() != end - (nl + 1))
      throw DatasetError(path.string() + ": payload size mismatch");
  } catch (const Json::exception& e) {
    throw DatasetError(path.string() + ": malformed header: " + e.what());
  } catch (const config::ConfigError& e) {
    throw DatasetError(path.string() + ": malformed fit: " + e.what());
  }
  if (offset != end) throw DatasetError(path.string() + ": payload longer than header declares");
  ds.validate();
  return ds;
}

// --- streaming -----------------------------------------------------------------

struct StreamWriter::Impl {
  std::filesystem::path path;
  std::filesystem::path payload_path;
  Kind kind;
  std::vector<Axis> axes;
  std::vector<ChannelSpec> specs;
  std::vector<std::size_t> counts;
  std::size_t n = 0;
  std::size_t current = 0;
  std::ofstream payload;
  bool finished = false;

  void pad_to(std::size_t channel) {
    static const std::string nan8 = encode(std::vector<double>{std::numeric_limits<double>::quiet_NaN()});
    while (current < channel) {
      for (; counts[current] < n; ++counts[current]) payload.write(nan8.data(), 8);
      ++current;
    }
  }
};

StreamWriter::StreamWriter(std::filesystem::path path, Kind kind, std::vector<Axis> axes,
                           std::vector<ChannelSpec> channels)
    : impl_(std::make_unique<Impl>()) {
  impl_->path = std::move(path);
  impl_->kind = kind;
  impl_->axes = std::move(axes);
  impl_->specs = std::move(channels);
  impl_->counts.assign(impl_->specs.size(), 0);
  impl_->n = grid_size(impl_->axes);
  const auto dir = impl_->path.has_parent_path() ? impl_->path.parent_path() : std::filesystem::path(".");
  impl_->payload_path =
      dir / ("." + impl_->path.filename().string() + ".payload-" + std::to_string(::getpid()));
  impl_->payload.open(impl_->payload_path, std::ios::binary | std::ios::trunc);
  if (!impl_->payload) throw DatasetError("cannot create " + impl_->payload_path.string());
  for (const auto& a : impl_->axes) {
    const std::string e = encode(a.values);
    impl_->payload.write(e.data(), static_cast<std::streamsize>(e.size()));
  }
}

StreamWriter::~StreamWriter() {
  if (impl_ && !impl_->finished) {
    impl_->payload.close();
    std::error_code ec;
    std::filesystem::remove(impl_->payload_path, ec);
  }
}

void StreamWriter::append(std::size_t channel, std::span<const double> values) {
  if (channel >= impl_->specs.size()) throw DatasetError("no such stream channel");
  if (channel < impl_->current) throw DatasetError("stream channels must be written in order");
  impl_->pad_to(channel);
  if (impl_->counts[channel] + values.size() > impl_->n) throw DatasetError("stream channel overflow");
  const std::string e = encode(values);
  impl_->payload.write(e.data(), static_cast<std::streamsize>(e.size()));
  impl_->counts[channel] += values.size();
  if (!impl_->payload) throw DatasetError("write failed for " + impl_->payload_path.string());
}

std::size_t StreamWriter::written(std::size_t channel) const { return impl_->counts.at(channel); }

void StreamWriter::finish(const Json& metadata, const std::vector<analysis::FitResult>& fits, bool aborted) {
  if (impl_->finished) throw DatasetError("stream already finished");
  impl_->pad_to(impl_->specs.size());
  impl_->payload.close();
  if (!impl_->payload) throw DatasetError("write failed for " + impl_->payload_path.string());

  Json ch = Json::array();
  for (const auto& s : impl_->specs)
    ch.push_back({{"name", s.name}, {"unit", s.unit}, {"length", impl_->n}, {"sigma", false}});
  const std::size_t payload = 8 * (grid_size(impl_->axes) * impl_->specs.size() + [&] {
                                std::size_t a = 0;
                                for (const auto& ax : impl_->axes) a += ax.values.size();
                                return a;
                              }());

  AtomicFile f(impl_->path);
  f.write(std::string(kMagic) + " " + std::to_string(kVersion) + "\n");
  f.write(dump_line(header_json(impl_->kind, impl_->axes, ch, metadata, fits, aborted, payload)) + "\n");
  std::ifstream in(impl_->payload_path, std::ios::binary);
  std::vector<char> buf(1 << 20);
  std::size_t copied = 0;
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got == 0) break;
    f.write(buf.data(), got);
    copied += got;
  }
  if (copied != payload) throw DatasetError("stream payload size mismatch");
  f.commit();
  in.close();
  std::error_code ec;
  std::filesystem::remove(impl_->payload_path, ec);
  impl_->finished = true;
}

}  // namespace nvtwin::data
