// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

namespace dora {

// Writes body to path via a sibling temp file plus rename, so readers never
// observe a half-written file. Throws IoError (prefixed with who) on failure.
void write_text_atomic(const std::filesystem::path& path, const std::string& body,
                       const std::string& who);

// Whole-file read. Throws IoError (prefixed with who) when unreadable.
std::string read_text_file(const std::filesystem::path& path, const std::string& who);

}  // namespace dora
