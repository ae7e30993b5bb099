#pragma once

#define ZSPLIT_VERSION_MAJOR 0
#define ZSPLIT_VERSION_MINOR 1
#define ZSPLIT_VERSION_PATCH 0

namespace zsplit {
inline constexpr const char* version = "0.1.0";
}
