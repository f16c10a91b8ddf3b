#include "ex2l/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ex2l {

namespace {

constexpr char kMagic[8] = {'E', 'X', '2', 'L', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct Reader {
  std::vector<unsigned char> buf;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw DataError(path + ": truncated checkpoint at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

const NetSnapshot* CheckpointFile::find(const std::string& name) const {
  for (const auto& n : nets)
    if (n.name == name) return &n;
  return nullptr;
}

NetSnapshot snapshot_net(const Network& net, std::string name) {
  return snapshot_net(net, std::move(name), net.snapshot());
}

NetSnapshot snapshot_net(const Network& net, std::string name,
                         const std::vector<NDArray>& params) {
  if (params.size() != net.params().size())
    throw UsageError("snapshot_net: parameter arity mismatch");
  NetSnapshot snap;
  snap.name = std::move(name);
  snap.arch = net.arch_string();
  for (std::size_t i = 0; i < params.size(); ++i)
    snap.params.emplace_back(net.param_names()[i], params[i]);
  return snap;
}

Network instantiate_net(const NetSnapshot& snap) {
  Rng rng(0);  // init overwritten below
  Network net = Network::from_arch_string(snap.arch, rng);
  if (net.params().size() != snap.params.size())
    throw DataError("checkpoint: parameter count does not match architecture");
  std::vector<NDArray> values;
  values.reserve(snap.params.size());
  for (const auto& [pname, arr] : snap.params) values.push_back(arr);
  net.restore(values);
  return net;
}

void save_checkpoint(const CheckpointFile& file, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path);
  out.write(kMagic, 8);
  put_u32(out, file.version);
  put_u32(out, static_cast<std::uint32_t>(file.nets.size()));
  for (const auto& net : file.nets) {
    put_str(out, net.name);
    put_str(out, net.arch);
    put_u32(out, static_cast<std::uint32_t>(net.params.size()));
    for (const auto& [pname, arr] : net.params) {
      put_str(out, pname);
      put_u32(out, static_cast<std::uint32_t>(arr.rank()));
      for (std::size_t e : arr.shape()) put_u64(out, e);
      for (std::size_t i = 0; i < arr.numel(); ++i) put_f64(out, arr[i]);
    }
  }
  if (!out) throw DataError("write failed for " + path);
}

CheckpointFile load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  Reader r;
  r.path = path;
  r.buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

  r.need(8);
  if (std::memcmp(r.buf.data(), kMagic, 8) != 0)
    throw DataError(path + ": bad checkpoint magic");
  r.pos = 8;

  CheckpointFile file;
  file.version = r.u32();
  if (file.version != 1)
    throw DataError(path + ": unsupported checkpoint version " +
                    std::to_string(file.version));
  std::uint32_t n_nets = r.u32();
  for (std::uint32_t ni = 0; ni < n_nets; ++ni) {
    NetSnapshot snap;
    snap.name = r.str();
    snap.arch = r.str();
    std::uint32_t n_params = r.u32();
    for (std::uint32_t pi = 0; pi < n_params; ++pi) {
      std::string pname = r.str();
      std::uint32_t rank = r.u32();
      std::vector<std::size_t> shape;
      for (std::uint32_t d = 0; d < rank; ++d)
        shape.push_back(static_cast<std::size_t>(r.u64()));
      NDArray arr(shape);
      for (std::size_t i = 0; i < arr.numel(); ++i) arr[i] = r.f64();
      snap.params.emplace_back(std::move(pname), std::move(arr));
    }
    file.nets.push_back(std::move(snap));
  }
  return file;
}

}  // namespace ex2l
