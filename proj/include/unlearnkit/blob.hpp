#pragma once

// Container used for checkpoints, importance maps and adversarial sets:
//   "ULKBLOB1" | u64 header length | JSON header | raw little-endian float32 blocks
// The header's "arrays" entry lists {"name", "shape"} for each block in file order.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unlearnkit/dataset.hpp"

namespace unlearnkit {

struct BlobArrayView {
    std::string name;
    Shape shape;
    std::span<const float> data;
};

struct Blob {
    nlohmann::json header;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<float>> arrays;
};

void write_blob(const std::filesystem::path& path, nlohmann::json header, const std::vector<BlobArrayView>& arrays);
Blob read_blob(const std::filesystem::path& path);

}  // namespace unlearnkit
