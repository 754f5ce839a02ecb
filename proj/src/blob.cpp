#include "unlearnkit/blob.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "binary_io.hpp"
#include "unlearnkit/errors.hpp"

namespace unlearnkit {

namespace {
constexpr char kMagic[8] = {'U', 'L', 'K', 'B', 'L', 'O', 'B', '1'};
}

void write_blob(const std::filesystem::path& path, nlohmann::json header, const std::vector<BlobArrayView>& arrays) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& a : arrays) {
        if (numel(a.shape) != a.data.size()) throw ContractError("blob array '" + a.name + "' size/shape mismatch");
        table.push_back({{"name", a.name}, {"shape", a.shape}});
    }
    header["arrays"] = table;
    const std::string text = header.dump();
    const std::uint64_t len = text.size();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : arrays) detail::write_raw(out, a.data);
    if (!out) throw IoError("write failed: " + path.string());
}

Blob read_blob(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("not a blob file: " + path.string());
    if (len > (std::uint64_t{1} << 32)) throw IoError("implausible header length in " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated header in " + path.string());

    Blob blob;
    try {
        blob.header = nlohmann::json::parse(text);
        for (const auto& entry : blob.header.at("arrays")) {
            blob.names.push_back(entry.at("name").get<std::string>());
            blob.shapes.push_back(entry.at("shape").get<Shape>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed blob header in " + path.string() + ": " + e.what());
    }
    for (const auto& shape : blob.shapes) {
        std::vector<float> values(numel(shape));
        detail::read_raw(in, std::span<float>(values), path.string());
        blob.arrays.push_back(std::move(values));
    }
    in.peek();
    if (!in.eof()) throw IoError("trailing bytes in " + path.string());
    return blob;
}

}  // namespace unlearnkit
