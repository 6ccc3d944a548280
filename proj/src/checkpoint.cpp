#include "ognet/checkpoint.hpp"

#include <cstring>

#include "ognet/binary_io.hpp"

namespace ognet {

namespace {

constexpr char kMagic[] = "OGCK";

std::size_t element_size(DType t) {
  switch (t) {
    case DType::kFloat32: return 4;
    case DType::kFloat64: return 8;
    case DType::kUtf8: return 1;
  }
  return 0;
}

}  // namespace

template <typename Scalar>
void Checkpoint::add(const std::string& name, const Tensor<Scalar>& tensor, DType storage) {
  if (storage == DType::kUtf8) throw ParameterError("tensor " + name + " cannot be stored as utf8");
  CheckpointEntry e;
  e.name = name;
  for (Index d : tensor.shape()) e.shape.push_back(static_cast<std::uint32_t>(d));
  e.dtype = storage;
  io::ByteWriter w;
  const Scalar* p = tensor.data().data();
  for (Index i = 0; i < tensor.size(); ++i) {
    if (storage == DType::kFloat32) {
      w.put(static_cast<float>(p[i]));
    } else {
      w.put(static_cast<double>(p[i]));
    }
  }
  e.payload = w.take();
  entries_.push_back(std::move(e));
}

void Checkpoint::add_text(const std::string& name, const std::string& text) {
  CheckpointEntry e;
  e.name = name;
  e.shape = {static_cast<std::uint32_t>(text.size())};
  e.dtype = DType::kUtf8;
  e.payload.assign(text.begin(), text.end());
  entries_.push_back(std::move(e));
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  const auto* e = find(name);
  if (!e) throw LoadError("checkpoint has no entry named " + name);
  return *e;
}

template <typename Scalar>
Tensor<Scalar> Checkpoint::tensor(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype == DType::kUtf8) throw FormatError("checkpoint entry " + name + " is text, not a tensor");
  Shape shape(e.shape.begin(), e.shape.end());
  const Index n = shape_size(shape);
  Matrix<Scalar> data(1, n);
  for (Index i = 0; i < n; ++i) {
    if (e.dtype == DType::kFloat32) {
      float v;
      std::memcpy(&v, e.payload.data() + 4 * i, 4);
      data(0, i) = static_cast<Scalar>(v);
    } else {
      double v;
      std::memcpy(&v, e.payload.data() + 8 * i, 8);
      data(0, i) = static_cast<Scalar>(v);
    }
  }
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

std::string Checkpoint::text(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != DType::kUtf8) throw FormatError("checkpoint entry " + name + " is not text");
  return {e.payload.begin(), e.payload.end()};
}

std::vector<std::uint8_t> Checkpoint::encode() const {
  io::ByteWriter w;
  w.put_magic(kMagic);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    w.put(static_cast<std::uint32_t>(e.name.size()));
    w.put_raw(e.name.data(), e.name.size());
    w.put(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.put(d);
    w.put(static_cast<std::uint8_t>(e.dtype));
    w.put_bytes(e.payload);
  }
  return w.take();
}

Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "checkpoint");
  r.expect_magic(kMagic);
  const std::size_t version_at = r.offset();
  if (r.get<std::uint16_t>() != kVersion) r.fail("unsupported version", version_at);
  const auto count = r.get<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name.resize(r.get<std::uint32_t>());
    r.get_raw(e.name.data(), e.name.size());
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t elements = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      e.shape.push_back(r.get<std::uint32_t>());
      elements *= e.shape.back();
    }
    const std::size_t tag_at = r.offset();
    const auto tag = r.get<std::uint8_t>();
    if (tag > static_cast<std::uint8_t>(DType::kUtf8)) r.fail("unknown dtype tag " + std::to_string(tag), tag_at);
    e.dtype = static_cast<DType>(tag);
    const std::uint64_t nbytes = elements * element_size(e.dtype);
    if (nbytes > r.remaining()) r.fail("truncated payload for entry " + e.name);
    e.payload.resize(nbytes);
    r.get_raw(e.payload.data(), nbytes);
    ck.entries_.push_back(std::move(e));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after last entry");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { io::write_file(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

template void Checkpoint::add(const std::string&, const Tensor<float>&, DType);
template void Checkpoint::add(const std::string&, const Tensor<double>&, DType);
template Tensor<float> Checkpoint::tensor(const std::string&) const;
template Tensor<double> Checkpoint::tensor(const std::string&) const;

}  // namespace ognet
