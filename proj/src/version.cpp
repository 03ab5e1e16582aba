#include "dtdsim/version.hpp"

#ifndef DTDSIM_VERSION
#define DTDSIM_VERSION "unknown"
#endif

namespace dtdsim {

const char* version() noexcept { return DTDSIM_VERSION; }

}  // namespace dtdsim
