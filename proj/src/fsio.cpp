// SPDX-License-Identifier: Apache-2.0
#include "dora/fsio.hpp"

#include <fstream>
#include <sstream>
#include <system_error>

#include "dora/errors.hpp"

namespace dora {

namespace fs = std::filesystem;

void write_text_atomic(const fs::path& path, const std::string& body, const std::string& who) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError(who + ": cannot open " + tmp.string() + " for writing");
    out << body;
    if (!out) throw IoError(who + ": write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError(who + ": rename to " + path.string() + " failed: " + ec.message());
  }
}

std::string read_text_file(const fs::path& path, const std::string& who) {
  std::ifstream in(path);
  if (!in) throw IoError(who + ": cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(who + ": read failed for " + path.string());
  return ss.str();
}

}  // namespace dora
