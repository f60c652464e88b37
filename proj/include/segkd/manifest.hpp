#pragma once

#include <map>
#include <string>

namespace segkd {

// UTF-8 key=value documents, one pair per line. Used for run manifests,
// checkpoint plan blocks, and report metadata.
std::map<std::string, std::string> parse_manifest(const std::string& text);
std::string render_manifest(const std::map<std::string, std::string>& kv);

std::string format_double(double v);

}  // namespace segkd
