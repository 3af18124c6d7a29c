#pragma once

#include <unistd.h>

#include <string>

#include "obsprobe/util.hpp"

namespace obsprobe::testing {

/// Fresh directory under the system temp root, removed on destruction.
struct TempDir {
    fs::path path;

    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("obsprobe_" + tag + "_" + hex64(fnv1a64(tag)).substr(0, 6) + "_" +
                std::to_string(static_cast<unsigned long>(::getpid())));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline fs::path source_dir() { return fs::path(OBSPROBE_SOURCE_DIR); }

}  // namespace obsprobe::testing
