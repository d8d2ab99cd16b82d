#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lomoe/datasynth.hpp"
#include "lomoe/errors.hpp"
#include "lomoe/tensor.hpp"

namespace lomoe {

// Tensor container: one ASCII header line "LMT1 <dtype> <ndims> <dims...>"
// followed by the raw little-endian payload. dtype is f32 or u16.

inline void write_lmt_f32(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open " + path.string() + " for writing");
    out << "LMT1 f32 " << t.rank();
    for (std::size_t d : t.shape()) out << ' ' << d;
    out << '\n';
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw ParseError("short write to " + path.string());
}

inline void write_lmt_u16(const std::filesystem::path& path,
                          const std::vector<std::uint16_t>& values,
                          const std::vector<std::size_t>& shape) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open " + path.string() + " for writing");
    out << "LMT1 u16 " << shape.size();
    for (std::size_t d : shape) out << ' ' << d;
    out << '\n';
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(std::uint16_t)));
    if (!out) throw ParseError("short write to " + path.string());
}

namespace detail_io {

struct LmtHeader {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::size_t count = 1;
};

inline LmtHeader read_lmt_header(std::istream& in, const std::string& name) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(name + ": missing header line");
    std::istringstream hs(line);
    std::string magic, dtype;
    std::size_t ndims = 0;
    hs >> magic >> dtype >> ndims;
    if (magic != "LMT1") throw ParseError(name + ": bad magic '" + magic + "'");
    if (dtype != "f32" && dtype != "u16") throw ParseError(name + ": bad dtype " + dtype);
    LmtHeader h;
    h.dtype = dtype;
    for (std::size_t i = 0; i < ndims; ++i) {
        std::size_t d = 0;
        if (!(hs >> d) || d == 0) throw ParseError(name + ": bad dimension list");
        h.shape.push_back(d);
        h.count *= d;
    }
    if (h.shape.empty()) throw ParseError(name + ": empty shape");
    return h;
}

} // namespace detail_io

inline Tensor read_lmt_f32(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    const auto h = detail_io::read_lmt_header(in, path.filename().string());
    if (h.dtype != "f32") throw ParseError(path.filename().string() + ": expected f32");
    std::vector<float> data(h.count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(h.count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != h.count * sizeof(float))
        throw ParseError(path.filename().string() + ": truncated payload");
    return Tensor::from(h.shape, std::move(data));
}

inline std::vector<std::uint16_t> read_lmt_u16(const std::filesystem::path& path,
                                               std::vector<std::size_t>& shape_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    const auto h = detail_io::read_lmt_header(in, path.filename().string());
    if (h.dtype != "u16") throw ParseError(path.filename().string() + ": expected u16");
    std::vector<std::uint16_t> data(h.count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(h.count * sizeof(std::uint16_t)));
    if (static_cast<std::size_t>(in.gcount()) != h.count * sizeof(std::uint16_t))
        throw ParseError(path.filename().string() + ": truncated payload");
    shape_out = h.shape;
    return data;
}

// ---------------------------------------------------------------------------
// dataset folders: manifest.json + one image/mask container pair per sample

inline void save_dataset(const std::filesystem::path& dir, const std::string& name, int task_id,
                         const std::vector<int>& classes, const std::vector<Sample>& samples) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format"] = "lomoe-dataset-v1";
    manifest["name"] = name;
    manifest["task_id"] = task_id;
    manifest["classes"] = classes;
    auto entries = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char img[32], msk[32];
        std::snprintf(img, sizeof(img), "img_%05zu.lmt", i);
        std::snprintf(msk, sizeof(msk), "msk_%05zu.lmt", i);
        write_lmt_f32(dir / img, samples[i].image);
        write_lmt_u16(dir / msk, samples[i].mask, {samples[i].height, samples[i].width});
        entries.push_back({{"image", img}, {"mask", msk}});
    }
    manifest["samples"] = entries;
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
}

struct FolderDataset {
    std::string name;
    int task_id = 0;
    std::vector<int> classes;
    std::vector<Sample> samples;
};

// Loads a dataset folder, validating shapes and label ids against the
// declared class set.
inline FolderDataset load_folder_dataset(const std::filesystem::path& dir) {
    FolderDataset ds;
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
        if (!std::filesystem::exists(dir) || std::filesystem::is_empty(dir)) {
            std::cerr << "warning: dataset directory " << dir.string()
                      << " is empty; loading an empty dataset\n";
            return ds;
        }
        throw ParseError("no manifest.json in " + dir.string());
    }
    std::ifstream in(manifest_path, std::ios::binary);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest.json: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "lomoe-dataset-v1")
        throw ParseError("manifest.json: unknown format");
    ds.name = manifest.value("name", "");
    ds.task_id = manifest.value("task_id", 0);
    for (const auto& c : manifest.at("classes")) ds.classes.push_back(c.get<int>());
    for (const auto& entry : manifest.at("samples")) {
        Sample s;
        s.task_id = ds.task_id;
        s.image = read_lmt_f32(dir / entry.at("image").get<std::string>());
        if (s.image.rank() != 2)
            throw ParseError(entry.at("image").get<std::string>() + ": image must be rank 2");
        s.height = s.image.dim(0);
        s.width = s.image.dim(1);
        std::vector<std::size_t> mshape;
        s.mask = read_lmt_u16(dir / entry.at("mask").get<std::string>(), mshape);
        if (mshape != s.image.shape())
            throw ValidationError(entry.at("mask").get<std::string>() +
                                  ": mask shape differs from image shape");
        for (std::uint16_t id : s.mask) {
            if (id == 0) continue;
            bool ok = false;
            for (int c : ds.classes) ok = ok || c == static_cast<int>(id);
            if (!ok)
                throw ValidationError(entry.at("mask").get<std::string>() + ": mask id " +
                                      std::to_string(id) + " not in the declared class set");
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace lomoe
