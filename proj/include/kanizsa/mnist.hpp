#pragma once

// IDX file reading and the stratified MNIST subset: of the 60k training
// images, 10k move to a new test set and 20k are deleted, per-class counts
// chosen by largest-remainder rounding so class frequencies are preserved
// and the totals are exact. The original 10k set becomes the validation set.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "kanizsa/common.hpp"
#include "kanizsa/rng.hpp"

namespace kanizsa {

struct LabeledImages {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> images;  // count * rows * cols
    std::vector<std::uint8_t> labels;

    size_t count() const { return labels.size(); }
    const std::uint8_t* image(size_t i) const {
        return images.data() + i * static_cast<size_t>(rows) * cols;
    }
};

namespace detail {

inline std::uint32_t read_u32_be(std::ifstream& f, const std::string& path) {
    std::uint8_t b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path + ": truncated header");
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace detail

/// Reads an IDX image file (magic 0x00000803) and its label file (0x00000801).
inline LabeledImages read_idx_pair(const std::string& images_path,
                                   const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw IoError("cannot open: " + images_path);
    if (detail::read_u32_be(fi, images_path) != 0x00000803u) {
        throw FormatError(images_path + ": bad IDX image magic");
    }
    std::uint32_t count = detail::read_u32_be(fi, images_path);
    std::uint32_t rows = detail::read_u32_be(fi, images_path);
    std::uint32_t cols = detail::read_u32_be(fi, images_path);

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw IoError("cannot open: " + labels_path);
    if (detail::read_u32_be(fl, labels_path) != 0x00000801u) {
        throw FormatError(labels_path + ": bad IDX label magic");
    }
    std::uint32_t label_count = detail::read_u32_be(fl, labels_path);
    if (label_count != count) {
        throw FormatError(labels_path + ": label count " + std::to_string(label_count) +
                          " does not match image count " + std::to_string(count));
    }

    LabeledImages data;
    data.rows = static_cast<int>(rows);
    data.cols = static_cast<int>(cols);
    data.images.resize(static_cast<size_t>(count) * rows * cols);
    data.labels.resize(count);
    if (!fi.read(reinterpret_cast<char*>(data.images.data()),
                 static_cast<std::streamsize>(data.images.size()))) {
        throw FormatError(images_path + ": truncated image data");
    }
    if (!fl.read(reinterpret_cast<char*>(data.labels.data()),
                 static_cast<std::streamsize>(data.labels.size()))) {
        throw FormatError(labels_path + ": truncated label data");
    }
    return data;
}

struct MnistSubset {
    LabeledImages train;  // 30k at MNIST scale
    LabeledImages val;    // the original evaluation set, untouched
    LabeledImages test;   // images moved out of the training set
};

namespace detail {

/// Largest-remainder apportionment of `total` over class counts.
inline std::array<int, 10> apportion(const std::array<int, 10>& class_counts, int grand_total,
                                     int total) {
    std::array<int, 10> out{};
    std::array<double, 10> remainders{};
    int assigned = 0;
    for (int c = 0; c < 10; ++c) {
        double exact = static_cast<double>(total) * class_counts[c] / grand_total;
        out[c] = static_cast<int>(exact);
        remainders[c] = exact - out[c];
        assigned += out[c];
    }
    std::array<int, 10> order{};
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return remainders[a] > remainders[b]; });
    for (int i = 0; assigned < total; ++i, ++assigned) out[order[i]] += 1;
    return out;
}

inline LabeledImages gather(const LabeledImages& src, std::vector<int>& indices) {
    std::sort(indices.begin(), indices.end());  // keep original file order
    LabeledImages out;
    out.rows = src.rows;
    out.cols = src.cols;
    size_t px = static_cast<size_t>(src.rows) * src.cols;
    out.images.resize(indices.size() * px);
    out.labels.resize(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(src.image(static_cast<size_t>(indices[i])), px, out.images.data() + i * px);
        out.labels[i] = src.labels[static_cast<size_t>(indices[i])];
    }
    return out;
}

}  // namespace detail

/// Splits the full training set (60k on genuine MNIST): per class c with
/// training frequency f_c, round(10000*f_c) images move to the test set and
/// round(20000*f_c) are deleted, with largest-remainder rounding hitting the
/// totals exactly. Selection is uniform within class from the derived seed.
inline MnistSubset mnist_subset(const LabeledImages& full_train, const LabeledImages& original_val,
                                std::uint64_t seed, int test_total = 10000,
                                int delete_total = 20000) {
    std::array<int, 10> class_counts{};
    std::array<std::vector<int>, 10> by_class;
    for (size_t i = 0; i < full_train.count(); ++i) {
        std::uint8_t c = full_train.labels[i];
        if (c > 9) throw FormatError("mnist_subset: label out of range");
        class_counts[c] += 1;
        by_class[c].push_back(static_cast<int>(i));
    }
    int grand_total = static_cast<int>(full_train.count());
    auto move_counts = detail::apportion(class_counts, grand_total, test_total);
    auto delete_counts = detail::apportion(class_counts, grand_total, delete_total);

    std::vector<int> test_indices;
    std::vector<int> train_indices;
    for (int c = 0; c < 10; ++c) {
        if (class_counts[c] < move_counts[c] + delete_counts[c]) {
            throw InsufficientClassCount("mnist_subset: class " + std::to_string(c) + " has only " +
                                         std::to_string(class_counts[c]) + " images");
        }
        // Uniform within-class selection: Fisher-Yates with a per-class stream.
        SplitMix64 rng(derive_seed(seed, 0, static_cast<std::uint64_t>(c)));
        auto& idx = by_class[c];
        for (size_t i = idx.size(); i > 1; --i) {
            size_t j = rng.next_below(i);
            std::swap(idx[i - 1], idx[j]);
        }
        test_indices.insert(test_indices.end(), idx.begin(), idx.begin() + move_counts[c]);
        train_indices.insert(train_indices.end(),
                             idx.begin() + move_counts[c] + delete_counts[c], idx.end());
    }

    MnistSubset out;
    out.train = detail::gather(full_train, train_indices);
    out.test = detail::gather(full_train, test_indices);
    out.val = original_val;
    return out;
}

}  // namespace kanizsa
