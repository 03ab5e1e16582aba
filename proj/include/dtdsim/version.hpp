#pragma once

namespace dtdsim {

/// `git describe` of the source tree at configure time.
const char* version() noexcept;

}  // namespace dtdsim
