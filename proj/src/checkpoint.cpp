#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nmqsd/hierarchy.hpp"

// Container layout (little-endian):
//   "NMQSDCKP" magic, u32 version, then a text header line terminated by '\n'
//   with key=value pairs, then per field: u32 name length, name bytes,
//   u32 rank, u64 extents[rank], then prod(extents) complex pairs (f64 re, f64 im).

namespace nmqsd {

namespace {

constexpr char kMagic[8] = {'N', 'M', 'Q', 'S', 'D', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("checkpoint: truncated file");
  return v;
}

void put_field(std::ofstream& os, const std::string& name, const std::vector<std::uint64_t>& extents,
               const cplx* data) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(extents.size()));
  std::uint64_t n = 1;
  for (auto e : extents) {
    put<std::uint64_t>(os, e);
    n *= e;
  }
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(cplx)));
}

std::string exact(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void write_checkpoint(const OHierarchy& h, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("checkpoint: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  const std::string header = "n_qubits=" + std::to_string(h.spec().n_qubits) + " depth=" + std::to_string(h.depth()) +
                             " closure=" + to_string(h.closure()) + " storage=" + to_string(h.storage()) +
                             " dt=" + exact(h.grid().dt) + " n_nodes=" + std::to_string(h.grid().n_nodes) +
                             " index=" + std::to_string(h.index()) + "\n";
  os.write(header.data(), static_cast<std::streamsize>(header.size()));

  const auto n = static_cast<std::uint64_t>(h.index()) + 1;
  const auto k0 = static_cast<std::uint64_t>(h.k0());
  const auto k1 = static_cast<std::uint64_t>(h.k1());
  const auto k2 = static_cast<std::uint64_t>(h.k2());

  // Fields are compacted to the live domain [0, index].
  std::vector<cplx> buf;
  Operator b0 = h.Obar0();
  put_field(os, "obar0", {k0}, b0.values().data());
  if (k1 > 0) {
    buf.clear();
    for (int k = 0; k < h.k1(); ++k) buf.insert(buf.end(), h.obar1(k), h.obar1(k) + n);
    put_field(os, "obar1", {k1, n}, buf.data());
  }
  if (k2 > 0) {
    buf.clear();
    for (int k = 0; k < h.k2(); ++k)
      for (std::uint64_t c2 = 0; c2 < n; ++c2) buf.insert(buf.end(), h.obar2(k, static_cast<int>(c2)), h.obar2(k, static_cast<int>(c2)) + n);
    put_field(os, "obar2", {k2, n, n}, buf.data());
  }
  if (h.has_fields()) {
    buf.clear();
    for (int k = 0; k < h.k0(); ++k) buf.insert(buf.end(), h.o0(k), h.o0(k) + n);
    put_field(os, "o0", {k0, n}, buf.data());
    if (k1 > 0) {
      buf.clear();
      for (std::uint64_t col = 0; col < n; ++col)
        for (int k = 0; k < h.k1(); ++k) buf.insert(buf.end(), h.o1(static_cast<int>(col), k), h.o1(static_cast<int>(col), k) + n);
      put_field(os, "o1", {n, k1, n}, buf.data());
    }
    if (h.has_o2_field()) {
      buf.clear();
      for (std::uint64_t c2 = 0; c2 < n; ++c2)
        for (std::uint64_t c1 = 0; c1 <= c2; ++c1)
          for (int k = 0; k < h.k2(); ++k) {
            const cplx* p = h.o2(static_cast<int>(c1), static_cast<int>(c2), k);
            buf.insert(buf.end(), p, p + n);
          }
      put_field(os, "o2_packed", {n * (n + 1) / 2, k2, n}, buf.data());
    }
  }
  if (!os) throw ConfigError("checkpoint: write failed for " + path);
}

const CheckpointField& Checkpoint::field(const std::string& name) const {
  for (const auto& f : fields)
    if (f.name == name) return f;
  throw ConfigError("checkpoint: no field named " + name);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw ConfigError("checkpoint: bad magic in " + path);
  Checkpoint ck;
  ck.version = get<std::uint32_t>(is);
  if (ck.version != kVersion) throw ConfigError("checkpoint: unsupported version " + std::to_string(ck.version));
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string kv;
  while (hs >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("checkpoint: malformed header entry " + kv);
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    if (key == "n_qubits") ck.n_qubits = std::stoi(val);
    else if (key == "depth") ck.depth = std::stoi(val);
    else if (key == "closure") ck.closure = val;
    else if (key == "storage") ck.storage = val;
    else if (key == "dt") ck.dt = std::stod(val);
    else if (key == "n_nodes") ck.n_nodes = std::stoi(val);
    else if (key == "index") ck.index = std::stoi(val);
  }
  while (is.peek() != std::char_traits<char>::eof()) {
    CheckpointField f;
    const auto len = get<std::uint32_t>(is);
    f.name.resize(len);
    is.read(f.name.data(), len);
    const auto rank = get<std::uint32_t>(is);
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      f.extents.push_back(get<std::uint64_t>(is));
      n *= f.extents.back();
    }
    f.values.resize(n);
    is.read(reinterpret_cast<char*>(f.values.data()), static_cast<std::streamsize>(n * sizeof(cplx)));
    if (!is) throw ConfigError("checkpoint: truncated field " + f.name);
    ck.fields.push_back(std::move(f));
  }
  return ck;
}

}  // namespace nmqsd
