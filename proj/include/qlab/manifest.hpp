#pragma once

#include <string>
#include <vector>

namespace qlab {

// One format name per line; '#' starts a comment, blank lines are skipped.
std::vector<std::string> parse_manifest_text(const std::string& text);

std::vector<std::string> load_format_manifest(const std::string& path);

// The canonical 36-format roster, embedded at build time from
// data/formats_all36.txt. Every name is validated on first use.
const std::vector<std::string>& all36_formats();

}  // namespace qlab
