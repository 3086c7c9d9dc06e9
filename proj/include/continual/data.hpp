#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "continual/common.hpp"
#include "continual/rng.hpp"

namespace continual {

enum class Split { train, test };

/// Labeled examples, one per row, features already scaled into [0,1].
struct Dataset {
    Mat inputs;
    std::vector<int> labels;
    Split split = Split::train;

    Index size() const { return inputs.rows(); }
    Index dim() const { return inputs.cols(); }
};

/// One step of the incremental stream: a label set disjoint from every other
/// task's, plus its train and test portions.
struct TaskSpec {
    int index = 0;  // 1-based position in the stream
    std::vector<int> labels;
    Dataset train;
    Dataset test;
};

struct TaskStream {
    std::vector<TaskSpec> tasks;

    int num_tasks() const { return static_cast<int>(tasks.size()); }

    const TaskSpec& task(int k) const {  // 1-based, matching the metrics convention
        require(k >= 1 && k <= num_tasks(), "task index out of range");
        return tasks[static_cast<std::size_t>(k - 1)];
    }

    /// All labels introduced up to and including task k.
    std::vector<int> labels_through(int k) const {
        std::vector<int> out;
        for (int j = 1; j <= k; ++j)
            for (int y : task(j).labels) out.push_back(y);
        return out;
    }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("truncated file: " + path);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

/// Reads an IDX image/label file pair (the MNIST container format): big-endian
/// magic 0x803 for images and 0x801 for labels, 32-bit big-endian dimensions,
/// then raw unsigned bytes. Pixels are scaled by 1/255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        Split split = Split::train) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("cannot open images file: " + images_path);
    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("cannot open labels file: " + labels_path);

    const std::uint32_t magic_i = detail::read_be32(imgs, images_path);
    if (magic_i != 0x00000803u)
        throw FormatError("bad magic in images file (got " + std::to_string(magic_i) +
                          ", want 2051): " + images_path);
    const std::uint32_t n_i = detail::read_be32(imgs, images_path);
    const std::uint32_t rows = detail::read_be32(imgs, images_path);
    const std::uint32_t cols = detail::read_be32(imgs, images_path);

    const std::uint32_t magic_l = detail::read_be32(labs, labels_path);
    if (magic_l != 0x00000801u)
        throw FormatError("bad magic in labels file (got " + std::to_string(magic_l) +
                          ", want 2049): " + labels_path);
    const std::uint32_t n_l = detail::read_be32(labs, labels_path);
    if (n_i != n_l)
        throw FormatError("image/label count mismatch: " + std::to_string(n_i) + " images vs " +
                          std::to_string(n_l) + " labels");

    const std::size_t d = std::size_t(rows) * std::size_t(cols);
    std::vector<unsigned char> buf(std::size_t(n_i) * d);
    imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(imgs.gcount()) != buf.size())
        throw IoError("truncated file: " + images_path);
    std::vector<unsigned char> lab(n_l);
    labs.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
    if (static_cast<std::size_t>(labs.gcount()) != lab.size())
        throw IoError("truncated file: " + labels_path);

    Dataset ds;
    ds.split = split;
    ds.inputs.resize(n_i, static_cast<Index>(d));
    for (std::uint32_t i = 0; i < n_i; ++i)
        for (std::size_t j = 0; j < d; ++j)
            ds.inputs(i, static_cast<Index>(j)) = buf[i * d + j] / 255.0;
    ds.labels.assign(lab.begin(), lab.end());
    return ds;
}

/// Writes a dataset back out in IDX form (values rounded to bytes). Mainly a
/// round-trip aid for tests and fixtures.
inline void write_idx(const Dataset& ds, const std::string& images_path,
                      const std::string& labels_path, std::uint32_t rows, std::uint32_t cols) {
    require(static_cast<Index>(rows) * static_cast<Index>(cols) == ds.dim(),
            "write_idx: rows*cols must equal the feature dimension");
    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("cannot write images file: " + images_path);
    detail::write_be32(imgs, 0x00000803u);
    detail::write_be32(imgs, static_cast<std::uint32_t>(ds.size()));
    detail::write_be32(imgs, rows);
    detail::write_be32(imgs, cols);
    for (Index i = 0; i < ds.size(); ++i)
        for (Index j = 0; j < ds.dim(); ++j) {
            const double v = std::clamp(ds.inputs(i, j), 0.0, 1.0) * 255.0;
            const unsigned char b = static_cast<unsigned char>(std::lround(v));
            imgs.write(reinterpret_cast<const char*>(&b), 1);
        }
    if (!imgs) throw IoError("write failed: " + images_path);

    std::ofstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("cannot write labels file: " + labels_path);
    detail::write_be32(labs, 0x00000801u);
    detail::write_be32(labs, static_cast<std::uint32_t>(ds.size()));
    for (int y : ds.labels) {
        const unsigned char b = static_cast<unsigned char>(y);
        labs.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!labs) throw IoError("write failed: " + labels_path);
}

/// Partitions train/test sets into tasks by label group, preserving example
/// order within each task. Groups must not overlap; labels absent from every
/// group are simply dropped.
inline TaskStream split_tasks(const Dataset& train, const Dataset& test,
                              const std::vector<std::vector<int>>& label_groups) {
    require(!label_groups.empty(), "split_tasks: no label groups");
    std::set<int> seen;
    for (const auto& g : label_groups) {
        require(!g.empty(), "split_tasks: empty label group");
        for (int y : g)
            if (!seen.insert(y).second)
                throw std::invalid_argument("split_tasks: label " + std::to_string(y) +
                                            " appears in more than one group");
    }
    auto take = [](const Dataset& src, const std::vector<int>& group, Split split) {
        std::vector<Index> idx;
        for (Index i = 0; i < src.size(); ++i)
            if (std::find(group.begin(), group.end(), src.labels[static_cast<std::size_t>(i)]) !=
                group.end())
                idx.push_back(i);
        Dataset out;
        out.split = split;
        out.inputs.resize(static_cast<Index>(idx.size()), src.dim());
        out.labels.reserve(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.inputs.row(static_cast<Index>(r)) = src.inputs.row(idx[r]);
            out.labels.push_back(src.labels[static_cast<std::size_t>(idx[r])]);
        }
        return out;
    };
    TaskStream stream;
    int k = 1;
    for (const auto& g : label_groups) {
        TaskSpec t;
        t.index = k++;
        t.labels = g;
        t.train = take(train, g, Split::train);
        t.test = take(test, g, Split::test);
        stream.tasks.push_back(std::move(t));
    }
    return stream;
}

inline std::vector<std::vector<int>> mnist_default_groups() {
    return {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
}

/// Loads the four standard MNIST files from a directory and splits them into
/// the incremental digit tasks.
inline TaskStream mnist_task_stream(const std::string& dir,
                                    std::vector<std::vector<int>> groups = {}) {
    namespace fs = std::filesystem;
    if (groups.empty()) groups = mnist_default_groups();
    const Dataset train = load_idx((fs::path(dir) / "train-images-idx3-ubyte").string(),
                                   (fs::path(dir) / "train-labels-idx1-ubyte").string(),
                                   Split::train);
    const Dataset test = load_idx((fs::path(dir) / "t10k-images-idx3-ubyte").string(),
                                  (fs::path(dir) / "t10k-labels-idx1-ubyte").string(),
                                  Split::test);
    return split_tasks(train, test, groups);
}

/// Deterministic Gaussian-blob stream for fast experiments. Class means sit
/// `separation` apart (exactly so when dim >= total class count, which makes
/// them mutually orthogonal directions); unit isotropic noise around each mean;
/// features affinely squashed into [0,1] using stream-wide per-dimension
/// extrema; 80/20 train/test split per class.
inline TaskStream synthetic_tasks(std::uint64_t seed, int num_tasks, int classes_per_task,
                                  int dim, int n_per_class, double separation) {
    require(num_tasks >= 1 && classes_per_task >= 1 && dim >= 1 && n_per_class >= 1,
            "synthetic_tasks: all counts must be >= 1");
    require(separation >= 0.0, "synthetic_tasks: separation must be >= 0");
    const int num_classes = num_tasks * classes_per_task;

    // Class directions: Gram-Schmidt over seeded Gaussian draws. When dim is too
    // small for orthogonality the directions are merely normalized.
    Rng dir_rng(derive_seed(seed, "synthetic-directions"));
    Mat dirs(num_classes, dim);
    for (int c = 0; c < num_classes; ++c) {
        Vec v(dim);
        for (int j = 0; j < dim; ++j) v(j) = dir_rng.normal();
        if (c < dim) {
            for (int p = 0; p < c; ++p) v -= dirs.row(p).dot(v) * dirs.row(p).transpose();
        }
        const double norm = v.norm();
        if (norm > 1e-12)
            dirs.row(c) = (v / norm).transpose();
        else
            dirs.row(c) = Vec::Unit(dim, c % dim).transpose();
    }
    const double scale = separation / std::sqrt(2.0);

    const int n_test = n_per_class / 5;
    const int n_train = n_per_class - n_test;
    TaskStream stream;
    for (int t = 0; t < num_tasks; ++t) {
        TaskSpec task;
        task.index = t + 1;
        task.train.split = Split::train;
        task.test.split = Split::test;
        task.train.inputs.resize(Index(n_train) * classes_per_task, dim);
        task.test.inputs.resize(Index(n_test) * classes_per_task, dim);
        for (int c = 0; c < classes_per_task; ++c) {
            const int label = t * classes_per_task + c;
            task.labels.push_back(label);
            Rng rng(derive_seed(seed, "synthetic-class", static_cast<std::uint64_t>(label)));
            for (int i = 0; i < n_per_class; ++i) {
                Vec x(dim);
                for (int j = 0; j < dim; ++j) x(j) = rng.normal();
                x += scale * dirs.row(label).transpose();
                if (i < n_train) {
                    task.train.inputs.row(Index(c) * n_train + i) = x.transpose();
                    task.train.labels.push_back(label);
                } else {
                    task.test.inputs.row(Index(c) * n_test + (i - n_train)) = x.transpose();
                    task.test.labels.push_back(label);
                }
            }
        }
        stream.tasks.push_back(std::move(task));
    }

    // Squash into [0,1] with one affine map per dimension, shared by every task
    // and split so geometry (hence separability) is preserved.
    Vec lo = Vec::Constant(dim, std::numeric_limits<double>::infinity());
    Vec hi = Vec::Constant(dim, -std::numeric_limits<double>::infinity());
    for (const TaskSpec& t : stream.tasks) {
        for (const Mat* m : {&t.train.inputs, &t.test.inputs}) {
            if (m->rows() == 0) continue;
            lo = lo.cwiseMin(m->colwise().minCoeff().transpose());
            hi = hi.cwiseMax(m->colwise().maxCoeff().transpose());
        }
    }
    for (TaskSpec& t : stream.tasks) {
        for (Mat* m : {&t.train.inputs, &t.test.inputs}) {
            for (Index j = 0; j < m->cols(); ++j) {
                const double span = hi(j) - lo(j);
                if (span > 0.0)
                    m->col(j) = (m->col(j).array() - lo(j)) / span;
                else
                    m->col(j).setConstant(0.5);
            }
        }
    }
    return stream;
}

}  // namespace continual
