#pragma once

// Dataset assembly: deterministic per-sample stimulus streams, dual
// persistence (PNG for inspection, packed "KNZ1" binary for training I/O),
// and a CSV manifest that records every sample's perturbation parameters.

#include <array>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "kanizsa/common.hpp"
#include "kanizsa/geometry.hpp"
#include "kanizsa/parallel.hpp"
#include "kanizsa/png.hpp"
#include "kanizsa/raster.hpp"
#include "kanizsa/rng.hpp"

namespace kanizsa {

enum class Split : std::uint32_t { Train = 0, Val = 1, Test = 2 };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

struct SampleCounts {
    int train = 0;
    int val = 0;
    int test = 0;

    int of(Split s) const {
        switch (s) {
            case Split::Train: return train;
            case Split::Val: return val;
            case Split::Test: return test;
        }
        return 0;
    }
};

struct GenConfig {
    DatasetKind kind = DatasetKind::Offs;
    SampleCounts counts;
    RasterConfig image;
    GeometryRanges ranges;
    std::uint64_t master_seed = 0;
};

/// The stimulus for (master_seed, split, index): pose, size and perturbation
/// parameters all come from the sample's derived seed. Even indices are
/// valid, odd indices invalid, so every prefix of even length is balanced.
/// Geometry violations resample with a fresh attempt seed, up to 100 times.
inline StimulusSpec sample_stimulus(const GeometryRanges& ranges, DatasetKind kind,
                                    std::uint64_t master_seed, Split split, int index) {
    const std::uint64_t base =
        derive_seed(master_seed, static_cast<std::uint32_t>(split), static_cast<std::uint64_t>(index));
    const double sqrt3 = std::sqrt(3.0);
    for (int attempt = 0; attempt < 100; ++attempt) {
        SplitMix64 rng(mix64(base ^ (0x5851f42d4c957f2dULL * static_cast<std::uint64_t>(attempt))));
        double r_ratio = rng.uniform(ranges.r_ratio_min, ranges.r_ratio_max);
        double circumradius = rng.uniform(ranges.circumradius_min, ranges.circumradius_max);
        double reach = circumradius + r_ratio * (circumradius * sqrt3);
        double lo = ranges.margin + reach;
        double hi = 1.0 - lo;
        if (!(hi > lo)) continue;  // draw cannot fit the frame
        TrianglePose pose;
        pose.centroid = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
        pose.circumradius = circumradius;
        pose.orientation = rng.uniform(0.0, two_pi);
        try {
            StimulusSpec stim = make_valid(pose, r_ratio, ranges.margin);
            if (index % 2 == 1) stim = make_invalid(stim, kind, rng, ranges);
            return stim;
        } catch (const InvalidGeometry&) {
        } catch (const GenerationExhausted&) {
        }
    }
    throw GenerationExhausted("sample_stimulus: split " + std::string(to_string(split)) +
                              " index " + std::to_string(index) + " exhausted 100 attempts");
}

inline StimulusSpec sample_stimulus(const GenConfig& cfg, Split split, int index) {
    return sample_stimulus(cfg.ranges, cfg.kind, cfg.master_seed, split, index);
}

// ---------------------------------------------------------------------------
// Packed "KNZ1" container: 16-byte header (4-byte magic "KNZ1" whose last
// byte is the format version, then u32 LE width, height, count), followed by
// count records of 1 label byte (0=valid, 1=invalid) + width*height
// intensity bytes. File size is exactly 16 + count*(1 + width*height).
// ---------------------------------------------------------------------------

struct PackedData {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> labels;  // one byte per sample
    std::vector<std::uint8_t> pixels;  // count * width * height, file order

    size_t count() const { return labels.size(); }
    const std::uint8_t* image(size_t i) const {
        return pixels.data() + i * static_cast<size_t>(width) * height;
    }
};

namespace detail {

inline void put_u32_le(std::ofstream& f, std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

class PackedWriter {
public:
    PackedWriter(const std::string& path, int width, int height, std::uint32_t count)
        : path_(path), width_(width), height_(height), expected_(count) {
        f_.open(path, std::ios::binary | std::ios::trunc);
        if (!f_) throw IoError("cannot open for writing: " + path);
        f_.write("KNZ1", 4);
        detail::put_u32_le(f_, static_cast<std::uint32_t>(width));
        detail::put_u32_le(f_, static_cast<std::uint32_t>(height));
        detail::put_u32_le(f_, count);
    }

    void append(Label label, const Image& img) {
        if (img.width != width_ || img.height != height_) {
            throw IoError("packed writer: image dimensions differ from header");
        }
        std::uint8_t lb = label == Label::Valid ? 0 : 1;
        f_.write(reinterpret_cast<const char*>(&lb), 1);
        f_.write(reinterpret_cast<const char*>(img.pixels.data()),
                 static_cast<std::streamsize>(img.pixels.size()));
        ++written_;
    }

    void close() {
        if (written_ != expected_) {
            throw IoError("packed writer: wrote " + std::to_string(written_) + " of " +
                          std::to_string(expected_) + " samples to " + path_);
        }
        f_.close();
        if (!f_) throw IoError("short write: " + path_);
    }

private:
    std::string path_;
    std::ofstream f_;
    int width_, height_;
    std::uint32_t expected_;
    std::uint32_t written_ = 0;
};

inline PackedData load_packed(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open: " + path);
    auto file_size = static_cast<std::uint64_t>(f.tellg());
    f.seekg(0);

    std::uint8_t header[16];
    if (file_size < 16 || !f.read(reinterpret_cast<char*>(header), 16)) {
        throw FormatError(path + ": truncated header");
    }
    if (std::memcmp(header, "KNZ", 3) != 0) throw FormatError(path + ": bad magic");
    if (header[3] != '1') throw FormatError(path + ": unsupported version");

    PackedData data;
    data.width = static_cast<int>(detail::get_u32_le(header + 4));
    data.height = static_cast<int>(detail::get_u32_le(header + 8));
    std::uint32_t count = detail::get_u32_le(header + 12);
    if (data.width <= 0 || data.height <= 0) {
        if (count != 0) throw FormatError(path + ": invalid dimensions");
    }

    std::uint64_t record = 1ull + static_cast<std::uint64_t>(data.width) * data.height;
    std::uint64_t expected = 16ull + count * record;
    if (file_size != expected) {
        throw FormatError(path + ": expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(file_size));
    }

    data.labels.resize(count);
    data.pixels.resize(count * (record - 1));
    for (std::uint32_t i = 0; i < count; ++i) {
        f.read(reinterpret_cast<char*>(&data.labels[i]), 1);
        f.read(reinterpret_cast<char*>(data.pixels.data() + i * (record - 1)),
               static_cast<std::streamsize>(record - 1));
    }
    if (!f) throw FormatError(path + ": read failed");
    return data;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestRow {
    int index = 0;
    Split split = Split::Train;
    std::string filename;
    Label label = Label::Valid;
    PerturbationRecord record;
    std::uint64_t seed = 0;
};

struct Manifest {
    std::vector<ManifestRow> rows;
};

inline constexpr const char* manifest_header =
    "index,split,filename,label,kind,targets,offset_d,offset_sign,angle_delta,rot_deltas,seed";

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename T, typename Fmt>
std::string join_semicolon(const std::vector<T>& xs, Fmt fmt) {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ';';
        out += fmt(xs[i]);
    }
    return out;
}

inline std::vector<std::string> split_string(const std::string& s, char sep) {
    std::vector<std::string> parts;
    size_t pos = 0;
    while (true) {
        size_t next = s.find(sep, pos);
        if (next == std::string::npos) {
            parts.push_back(s.substr(pos));
            break;
        }
        parts.push_back(s.substr(pos, next - pos));
        pos = next + 1;
    }
    return parts;
}

}  // namespace detail

inline std::string manifest_row_to_csv(const ManifestRow& row) {
    const PerturbationRecord& rec = row.record;
    std::string line = std::to_string(row.index);
    line += ',';
    line += to_string(row.split);
    line += ',';
    line += row.filename;
    line += ',';
    line += row.label == Label::Valid ? "valid" : "invalid";
    line += ',';
    line += to_string(rec.kind);
    line += ',';
    line += detail::join_semicolon(rec.targets, [](int t) { return std::to_string(t); });
    line += ',';
    if (rec.kind == PerturbKind::Offset) line += detail::format_double(rec.offset_distance);
    line += ',';
    if (rec.kind == PerturbKind::Offset) line += std::to_string(rec.offset_sign);
    line += ',';
    if (rec.kind == PerturbKind::Angle) line += detail::format_double(rec.angle_delta);
    line += ',';
    line += detail::join_semicolon(rec.rotation_deltas,
                                   [](double d) { return detail::format_double(d); });
    line += ',';
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%" PRIu64, row.seed);
    line += buf;
    return line;
}

inline void write_manifest_csv(const std::string& path, const Manifest& manifest) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);  // binary: LF line endings
    if (!f) throw IoError("cannot open for writing: " + path);
    f << manifest_header << '\n';
    for (const auto& row : manifest.rows) f << manifest_row_to_csv(row) << '\n';
    if (!f) throw IoError("short write: " + path);
}

inline Manifest parse_manifest_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw FormatError(path + ": empty manifest");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != manifest_header) throw FormatError(path + ": unexpected manifest header");

    Manifest manifest;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cols = detail::split_string(line, ',');
        if (cols.size() != 11) throw FormatError(path + ": bad column count in row");
        ManifestRow row;
        row.index = std::stoi(cols[0]);
        if (cols[1] == "train") row.split = Split::Train;
        else if (cols[1] == "val") row.split = Split::Val;
        else if (cols[1] == "test") row.split = Split::Test;
        else throw FormatError(path + ": unknown split " + cols[1]);
        row.filename = cols[2];
        if (cols[3] == "valid") row.label = Label::Valid;
        else if (cols[3] == "invalid") row.label = Label::Invalid;
        else throw FormatError(path + ": unknown label " + cols[3]);
        if (cols[4] == "none") row.record.kind = PerturbKind::None;
        else if (cols[4] == "offset") row.record.kind = PerturbKind::Offset;
        else if (cols[4] == "angle") row.record.kind = PerturbKind::Angle;
        else if (cols[4] == "rot") row.record.kind = PerturbKind::Rot;
        else throw FormatError(path + ": unknown kind " + cols[4]);
        if (!cols[5].empty()) {
            for (const auto& t : detail::split_string(cols[5], ';')) {
                row.record.targets.push_back(std::stoi(t));
            }
        }
        if (!cols[6].empty()) row.record.offset_distance = std::stod(cols[6]);
        if (!cols[7].empty()) row.record.offset_sign = std::stoi(cols[7]);
        if (!cols[8].empty()) row.record.angle_delta = std::stod(cols[8]);
        if (!cols[9].empty()) {
            for (const auto& d : detail::split_string(cols[9], ';')) {
                row.record.rotation_deltas.push_back(std::stod(d));
            }
        }
        row.seed = std::strtoull(cols[10].c_str(), nullptr, 10);
        manifest.rows.push_back(std::move(row));
    }
    return manifest;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Generates one dataset (train/val/test splits) under out_dir: per-sample
/// PNGs, one packed file per split, and manifest.csv. Fully deterministic
/// from the config; samples are generated in parallel chunks but written in
/// index order.
inline Manifest generate_dataset(const GenConfig& cfg, const std::string& out_dir,
                                 int threads = 1, bool write_pngs = true) {
    namespace fs = std::filesystem;
    if (cfg.counts.train < 0 || cfg.counts.val < 0 || cfg.counts.test < 0 ||
        cfg.counts.train + cfg.counts.val + cfg.counts.test <= 0) {
        throw InvalidGeometry("generate_dataset: counts must be positive");
    }
    for (Split split : {Split::Train, Split::Val, Split::Test}) {
        if (cfg.counts.of(split) % 2 != 0) {
            throw InvalidGeometry("generate_dataset: odd split size breaks exact class balance");
        }
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    Manifest manifest;
    const int chunk_size = 512;
    for (Split split : {Split::Train, Split::Val, Split::Test}) {
        const int count = cfg.counts.of(split);
        const std::string split_name = to_string(split);
        if (write_pngs) {
            fs::create_directories(fs::path(out_dir) / split_name, ec);
            if (ec) throw IoError("cannot create split dir: " + ec.message());
        }
        PackedWriter packed((fs::path(out_dir) / (split_name + ".knz")).string(), cfg.image.width,
                            cfg.image.height, static_cast<std::uint32_t>(count));

        std::vector<StimulusSpec> stims(std::min(chunk_size, std::max(count, 1)));
        std::vector<Image> images(stims.size());
        for (int chunk_begin = 0; chunk_begin < count; chunk_begin += chunk_size) {
            const int chunk_end = std::min(chunk_begin + chunk_size, count);
            const int n = chunk_end - chunk_begin;
            std::exception_ptr worker_error;
            std::mutex error_mutex;
            parallel_chunks(n, threads, [&](int begin, int end, int) {
                try {
                    for (int i = begin; i < end; ++i) {
                        int index = chunk_begin + i;
                        stims[i] = sample_stimulus(cfg, split, index);
                        images[i] = rasterize(stims[i], cfg.image);
                        if (write_pngs) {
                            char name[32];
                            std::snprintf(name, sizeof(name), "%06d.png", index);
                            write_png_gray8((fs::path(out_dir) / split_name / name).string(),
                                            images[i]);
                        }
                    }
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!worker_error) worker_error = std::current_exception();
                }
            });
            if (worker_error) std::rethrow_exception(worker_error);

            for (int i = 0; i < n; ++i) {
                int index = chunk_begin + i;
                packed.append(stims[i].label, images[i]);
                ManifestRow row;
                row.index = index;
                row.split = split;
                char name[32];
                std::snprintf(name, sizeof(name), "%06d.png", index);
                row.filename = split_name + "/" + name;
                row.label = stims[i].label;
                row.record = stims[i].record;
                row.seed = derive_seed(cfg.master_seed, static_cast<std::uint32_t>(split),
                                       static_cast<std::uint64_t>(index));
                manifest.rows.push_back(std::move(row));
            }
        }
        packed.close();
    }
    write_manifest_csv((fs::path(out_dir) / "manifest.csv").string(), manifest);
    return manifest;
}

}  // namespace kanizsa
