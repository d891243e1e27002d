#pragma once

#include <string>

namespace vqmoe {

// Writes to a sibling ".tmp" file and renames over the target, so a reader
// never observes a half-written file.
void atomic_write_text(const std::string& path, const std::string& content);

std::string read_text_file(const std::string& path);

// %.17g: enough digits that reading the text back yields the same double.
std::string fmt_double(double v);

}  // namespace vqmoe
