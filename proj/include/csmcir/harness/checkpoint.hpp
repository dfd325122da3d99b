// Single-file training state.
//
// Layout, all integers little-endian u64 unless noted:
//   magic "CSMCIRCK" (8 bytes), version (u32)
//   config:  length, UTF-8 JSON
//   step, rng seed, rng counter, optimizer step
//   tensors: count, then per tensor name length, name, rows, cols, rows*cols f64
//     params.<name>, adam_m.<name>, adam_v.<name>, bank.image, bank.caption
//   bank:    next_sequence, entry count, then per entry delta_t, inserted_at,
//            id length, id bytes

#ifndef CSMCIR_HARNESS_CHECKPOINT_HPP
#define CSMCIR_HARNESS_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <string>

#include "csmcir/encoder.hpp"
#include "csmcir/harness/config.hpp"
#include "csmcir/harness/optimizer.hpp"
#include "csmcir/memory_bank.hpp"
#include "csmcir/numerics.hpp"

namespace csmcir::harness {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  EncoderParams params;  // includes the alignment weights alpha
  AdamWState optimizer;
  MemoryBank bank{BankOptions{}};
  std::uint64_t step = 0;
  Rng rng;

  bool operator==(const Checkpoint& other) const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
/// Throws SchemaError on a bad magic, an unsupported version or truncation.
Checkpoint deserialize_checkpoint(const std::string& bytes);

/// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace csmcir::harness

#endif  // CSMCIR_HARNESS_CHECKPOINT_HPP
