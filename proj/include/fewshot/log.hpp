#pragma once

#include <string>

namespace fewshot::log {

/// Progress lines go to standard error; silenced in tests.
void set_verbose(bool on);
bool verbose();
void info(const std::string& message);

}  // namespace fewshot::log
