#include "knfu/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "knfu/errors.hpp"

namespace knfu::nn {

namespace {

constexpr char kMagic[4] = {'K', 'N', 'F', 'U'};

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > in.size()) throw IoError(path, "truncated checkpoint");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string id = model.spec().id();
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
  out += id;
  const auto params = model.parameters();
  put_le<std::uint64_t>(out, params.size());
  for (double p : params)
    put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(p)));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path.string(), "cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError(path.string(), "write failed");
}

Model load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string(), "cannot open for reading");
  const std::string in((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  const auto p = path.string();
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0)
    throw IoError(p, "bad checkpoint magic");
  std::size_t pos = 4;
  const auto id_len = get_le<std::uint32_t>(in, pos, p);
  if (pos + id_len > in.size()) throw IoError(p, "truncated checkpoint");
  const std::string id = in.substr(pos, id_len);
  pos += id_len;
  if (id != spec.id())
    throw InputError("checkpoint spec '" + id + "' does not match '" +
                     spec.id() + "'");
  const auto count = get_le<std::uint64_t>(in, pos, p);
  std::vector<double> params(count);
  for (auto& v : params)
    v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(in, pos, p)));
  return Model(spec, std::move(params));
}

}  // namespace knfu::nn
