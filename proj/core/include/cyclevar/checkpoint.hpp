#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cyclevar/common.hpp"

namespace cyclevar {

// One named parameter as stored on disk: float32 payload regardless of the
// compute precision, so files are portable across builds.
struct TensorRecord {
    std::string name;
    std::vector<size_t> shape;
    std::vector<float> data;
};

struct CheckpointData {
    int format_version = 1;
    std::vector<std::string> config;    // key=value snapshot lines
    std::vector<TensorRecord> tensors;  // blob order
};

// Layout: magic "CYCKPT1\n", little-endian u64 manifest length, JSON manifest
// (sorted keys), then one contiguous little-endian float32 blob. The manifest
// carries an FNV-1a hash of the blob; load refuses a file whose payload does
// not match. save(load(p)) writes byte-identical files.
void checkpoint_save(const std::string& path, const CheckpointData& ck);
CheckpointData checkpoint_load(const std::string& path);

uint64_t fnv1a64(const unsigned char* p, size_t n);

}  // namespace cyclevar
