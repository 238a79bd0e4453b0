#include "cyclevar/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace cyclevar {

namespace {

constexpr char kMagic[8] = {'C', 'Y', 'C', 'K', 'P', 'T', '1', '\n'};

void put_u64le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint64_t get_u64le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}

std::string hex64(uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string blob_of(const CheckpointData& ck) {
    std::string blob;
    size_t total = 0;
    for (const auto& t : ck.tensors) total += t.data.size();
    blob.reserve(total * 4);
    for (const auto& t : ck.tensors)
        for (float f : t.data) {
            uint32_t bits = 0;
            std::memcpy(&bits, &f, 4);
            for (int i = 0; i < 4; ++i) blob.push_back(char((bits >> (8 * i)) & 0xff));
        }
    return blob;
}

}  // namespace

uint64_t fnv1a64(const unsigned char* p, size_t n) {
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

void checkpoint_save(const std::string& path, const CheckpointData& ck) {
    for (const auto& t : ck.tensors) {
        size_t numel = 1;
        for (size_t d : t.shape) numel *= d;
        if (numel != t.data.size())
            throw Error("checkpoint_save: tensor '" + t.name + "' shape/data mismatch");
        if (t.name.empty()) throw Error("checkpoint_save: unnamed tensor");
    }

    const std::string blob = blob_of(ck);
    nlohmann::json manifest;
    manifest["format_version"] = ck.format_version;
    manifest["config"] = ck.config;
    manifest["blob_fnv1a"] =
        hex64(fnv1a64(reinterpret_cast<const unsigned char*>(blob.data()), blob.size()));
    nlohmann::json tensors = nlohmann::json::array();
    size_t offset = 0;
    for (const auto& t : ck.tensors) {
        nlohmann::json rec;
        rec["name"] = t.name;
        rec["shape"] = t.shape;
        rec["dtype"] = "f32";
        rec["offset"] = offset;
        rec["numel"] = t.data.size();
        tensors.push_back(rec);
        offset += t.data.size() * 4;
    }
    manifest["tensors"] = tensors;

    const std::string text = manifest.dump();
    std::string head;
    head.append(kMagic, 8);
    put_u64le(head, text.size());

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint_save: cannot open '" + path + "' for writing");
    out.write(head.data(), std::streamsize(head.size()));
    out.write(text.data(), std::streamsize(text.size()));
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw Error("checkpoint_save: short write to '" + path + "'");
}

CheckpointData checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint_load: cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw Error("checkpoint_load: '" + path + "' is not a CYCKPT1 checkpoint");
    const uint64_t manifest_len = get_u64le(bytes.data() + 8);
    if (16 + manifest_len > bytes.size())
        throw Error("checkpoint_load: truncated manifest in '" + path + "'");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 16,
                                         bytes.begin() + 16 + std::ptrdiff_t(manifest_len));
    } catch (const std::exception& e) {
        throw Error("checkpoint_load: bad manifest in '" + path + "': " + e.what());
    }

    CheckpointData ck;
    ck.format_version = manifest.value("format_version", 0);
    if (ck.format_version != 1)
        throw Error("checkpoint_load: unsupported format_version " +
                    std::to_string(ck.format_version) + " in '" + path + "'");
    for (const auto& line : manifest.at("config")) ck.config.push_back(line.get<std::string>());

    const unsigned char* blob = bytes.data() + 16 + manifest_len;
    const size_t blob_len = bytes.size() - 16 - manifest_len;
    const std::string want_hash = manifest.at("blob_fnv1a").get<std::string>();
    const std::string got_hash = hex64(fnv1a64(blob, blob_len));
    if (want_hash != got_hash)
        throw Error("checkpoint_load: payload hash mismatch in '" + path + "' (manifest " +
                    want_hash + ", blob " + got_hash + "); file is corrupt");

    for (const auto& rec : manifest.at("tensors")) {
        TensorRecord t;
        t.name = rec.at("name").get<std::string>();
        t.shape = rec.at("shape").get<std::vector<size_t>>();
        const size_t numel = rec.at("numel").get<size_t>();
        const size_t offset = rec.at("offset").get<size_t>();
        if (rec.at("dtype").get<std::string>() != "f32")
            throw Error("checkpoint_load: tensor '" + t.name + "' has unsupported dtype");
        size_t shape_numel = 1;
        for (size_t d : t.shape) shape_numel *= d;
        if (shape_numel != numel || offset + numel * 4 > blob_len)
            throw Error("checkpoint_load: tensor '" + t.name + "' has inconsistent extent");
        t.data.resize(numel);
        for (size_t i = 0; i < numel; ++i) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= uint32_t(blob[offset + i * 4 + size_t(b)]) << (8 * b);
            std::memcpy(&t.data[i], &bits, 4);
        }
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

}  // namespace cyclevar
