#pragma once

// Binary blob + JSON manifest persistence. One `<base>.bin` holds every
// array's doubles back to back (little-endian f64); `<base>.json` records
// name/shape/offset per entry plus the seed the producing run used. The same
// pair of files stores parameter checkpoints and synthetic-corpus pixel data.

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fable/errors.hpp"
#include "fable/nn.hpp"
#include "fable/tensor.hpp"

namespace fable {

struct BlobStore {
    std::vector<std::pair<std::string, Array>> items;  // insertion order

    void add(std::string name, Array value) {
        for (const auto& [n, v] : items)
            if (n == name) throw ValueError("blob: duplicate entry '" + name + "'");
        items.emplace_back(std::move(name), std::move(value));
    }

    bool has(const std::string& name) const {
        for (const auto& [n, v] : items)
            if (n == name) return true;
        return false;
    }

    const Array& get(const std::string& name) const {
        for (const auto& [n, v] : items)
            if (n == name) return v;
        throw ValueError("blob: no entry '" + name + "'");
    }
};

inline void save_blob(const BlobStore& store, const std::string& base, uint64_t seed) {
    nlohmann::ordered_json manifest;
    manifest["format"] = "fable-blob";
    manifest["version"] = 1;
    manifest["dtype"] = "f64le";
    manifest["seed"] = seed;
    manifest["entries"] = nlohmann::ordered_json::array();

    std::ofstream bin(base + ".bin", std::ios::binary);
    if (!bin) throw ValueError("save_blob: cannot open " + base + ".bin");
    int64_t offset = 0;  // in doubles
    for (const auto& [name, arr] : store.items) {
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = arr.shape;
        e["offset"] = offset;
        manifest["entries"].push_back(e);
        bin.write(reinterpret_cast<const char*>(arr.data.data()),
                  static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
        offset += arr.size();
    }
    manifest["total"] = offset;
    bin.close();
    if (!bin) throw ValueError("save_blob: write failed for " + base + ".bin");

    std::ofstream mf(base + ".json");
    if (!mf) throw ValueError("save_blob: cannot open " + base + ".json");
    mf << manifest.dump(2) << "\n";
}

inline BlobStore load_blob(const std::string& base) {
    std::ifstream mf(base + ".json");
    if (!mf) throw ValueError("load_blob: cannot open " + base + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ContentError("load_blob: bad manifest " + base + ".json: " + e.what());
    }
    if (manifest.value("format", "") != "fable-blob" || manifest.value("dtype", "") != "f64le")
        throw ContentError("load_blob: unrecognized manifest format in " + base + ".json");
    int64_t total = manifest.value("total", int64_t{-1});

    std::ifstream bin(base + ".bin", std::ios::binary | std::ios::ate);
    if (!bin) throw ValueError("load_blob: cannot open " + base + ".bin");
    int64_t bytes = static_cast<int64_t>(bin.tellg());
    if (bytes != total * static_cast<int64_t>(sizeof(double)))
        throw IncompleteDataError("load_blob: " + base + ".bin holds " + std::to_string(bytes) +
                                  " bytes, manifest wants " +
                                  std::to_string(total * sizeof(double)));
    bin.seekg(0);

    BlobStore store;
    int64_t expect_offset = 0;
    for (const auto& e : manifest.at("entries")) {
        std::string name = e.at("name").get<std::string>();
        Shape shape = e.at("shape").get<Shape>();
        int64_t offset = e.at("offset").get<int64_t>();
        if (offset != expect_offset)
            throw ContentError("load_blob: non-contiguous offset for '" + name + "'");
        Array arr(shape);
        bin.read(reinterpret_cast<char*>(arr.data.data()),
                 static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
        if (bin.gcount() != static_cast<std::streamsize>(arr.data.size() * sizeof(double)))
            throw IncompleteDataError("load_blob: truncated data for '" + name + "'");
        expect_offset += arr.size();
        store.add(name, std::move(arr));
    }
    if (expect_offset != total)
        throw ContentError("load_blob: entry sizes disagree with manifest total");
    return store;
}

inline uint64_t blob_seed(const std::string& base) {
    std::ifstream mf(base + ".json");
    if (!mf) throw ValueError("blob_seed: cannot open " + base + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ContentError("blob_seed: bad manifest " + base + ".json: " + e.what());
    }
    return manifest.value("seed", uint64_t{0});
}

// ---- parameter checkpoints ----

inline void save_checkpoint(const ParamStore& ps, const std::string& base, uint64_t seed) {
    BlobStore store;
    for (const auto& p : ps.all()) store.add(p->name, p->value);
    save_blob(store, base, seed);
}

// Strict: the store must already hold exactly the checkpointed names and
// shapes (i.e. the same model built the store), then values are copied in.
inline uint64_t load_checkpoint(ParamStore& ps, const std::string& base) {
    BlobStore store = load_blob(base);
    if (store.items.size() != ps.count())
        throw ContentError("load_checkpoint: store has " + std::to_string(ps.count()) +
                           " params, checkpoint has " + std::to_string(store.items.size()));
    for (auto& [name, arr] : store.items) {
        if (!ps.has(name)) throw ContentError("load_checkpoint: unknown param '" + name + "'");
        Param& p = ps.get(name);
        if (p.value.shape != arr.shape)
            throw ContentError("load_checkpoint: shape mismatch for '" + name + "': store " +
                               shape_str(p.value.shape) + ", checkpoint " + shape_str(arr.shape));
        p.value = std::move(arr);
    }
    return blob_seed(base);
}

}  // namespace fable
