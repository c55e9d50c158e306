#include "qlab/manifest.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "qlab/formats.hpp"
#include "qlab/manifest_data.h"

namespace qlab {

std::vector<std::string> parse_manifest_text(const std::string& text) {
  std::vector<std::string> names;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const std::size_t e = line.find_last_not_of(" \t\r");
    names.push_back(line.substr(b, e - b + 1));
  }
  return names;
}

std::vector<std::string> load_format_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open format manifest: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest_text(buf.str());
}

const std::vector<std::string>& all36_formats() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v = parse_manifest_text(kFormatManifestText);
    for (const std::string& n : v) parse_format(n);
    return v;
  }();
  return names;
}

}  // namespace qlab
