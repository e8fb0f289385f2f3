#include <zlib.h>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mmvr/errors.hpp"
#include "mmvr/serialize.hpp"
#include "mmvr/trainer.hpp"

namespace mmvr {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'V', 'R', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc_of(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

void put_rng_state(ByteWriter& w, const Rng::State& s) {
  for (std::uint64_t word : s) w.put_u64(word);
}

Rng::State get_rng_state(ByteReader& r) {
  Rng::State s{};
  for (auto& word : s) word = r.get_u64();
  return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ByteWriter payload;
  payload.put_u64(ckpt.config_fingerprint);
  payload.put_i64(ckpt.step);
  put_rng_state(payload, ckpt.trainer_rng);
  put_rng_state(payload, ckpt.masking_rng);

  payload.put_u64(ckpt.params.tensors.size());
  for (const auto& [name, t] : ckpt.params.tensors) {
    payload.put_string(name);
    payload.put_u8(t.requires_grad() ? 1 : 0);
    payload.put_i32_vec(t.shape());
    payload.put_f64_vec(std::vector<double>(t.data(), t.data() + t.size()));
  }

  payload.put_i64(ckpt.adam.step);
  payload.put_u64(ckpt.adam.slots.size());
  for (const auto& [name, slot] : ckpt.adam.slots) {
    payload.put_string(name);
    payload.put_f64_vec(slot.m);
    payload.put_f64_vec(slot.v);
  }

  ByteWriter out;
  out.put_bytes(kMagic, sizeof kMagic);
  out.put_u32(kVersion);
  out.put_u64(payload.size());
  out.put_bytes(payload.bytes().data(), payload.size());
  out.put_u32(crc_of(payload.bytes()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  f.write(reinterpret_cast<const char*>(out.bytes().data()),
          static_cast<std::streamsize>(out.size()));
  f.flush();
  if (!f) throw DataError("short write to checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint,
                           bool force) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("checkpoint not found: " + path);
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());

  ByteReader head(raw.data(), raw.size());
  char magic[8];
  head.get_bytes(magic, sizeof magic);
  if (std::string(magic, 8) != std::string(kMagic, 8))
    throw DataError("bad checkpoint magic in " + path);
  const std::uint32_t version = head.get_u32();
  if (version != kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const std::uint64_t payload_len = head.get_u64();
  std::vector<std::uint8_t> payload(payload_len);
  head.get_bytes(payload.data(), payload_len);
  const std::uint32_t stored_crc = head.get_u32();
  if (crc_of(payload) != stored_crc)
    throw DataError("checkpoint crc mismatch in " + path);

  ByteReader r(payload.data(), payload.size());
  Checkpoint ckpt;
  ckpt.version = version;
  ckpt.config_fingerprint = r.get_u64();
  ckpt.step = r.get_i64();
  ckpt.trainer_rng = get_rng_state(r);
  ckpt.masking_rng = get_rng_state(r);

  const std::uint64_t n_tensors = r.get_u64();
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.get_string();
    const bool requires_grad = r.get_u8() != 0;
    const Shape shape = r.get_i32_vec();
    std::vector<double> data = r.get_f64_vec();
    if (static_cast<std::int64_t>(data.size()) != detail::numel(shape))
      throw DataError("checkpoint tensor " + name + " has " + std::to_string(data.size()) +
                      " values for shape " + detail::shape_str(shape));
    ckpt.params.tensors.emplace(name, Tensor::from_data(shape, std::move(data), requires_grad));
  }

  ckpt.adam.step = r.get_i64();
  const std::uint64_t n_slots = r.get_u64();
  for (std::uint64_t i = 0; i < n_slots; ++i) {
    const std::string name = r.get_string();
    AdamSlots slot;
    slot.m = r.get_f64_vec();
    slot.v = r.get_f64_vec();
    ckpt.adam.slots.emplace(name, std::move(slot));
  }
  if (r.remaining() != 0)
    throw DataError("trailing bytes in checkpoint " + path);

  if (expect_fingerprint && ckpt.config_fingerprint != *expect_fingerprint && !force)
    throw ConfigError("checkpoint fingerprint mismatch: run config does not match " + path +
                      " (pass force to override)");
  return ckpt;
}

}  // namespace mmvr
