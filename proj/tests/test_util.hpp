#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>

#include "dmt/rng.hpp"
#include "dmt/tensor.hpp"

namespace testutil {

/// Unique scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("dmt_test_" + tag + "_" + std::to_string(++counter) + "_" +
                 std::to_string(static_cast<unsigned>(::getpid())));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline dmt::Tensor random_tensor(std::vector<int> shape, dmt::Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
    dmt::Tensor t = dmt::Tensor::zeros(std::move(shape));
    for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace testutil
