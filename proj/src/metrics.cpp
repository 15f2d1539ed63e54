#include "gridloop/metrics.hpp"

// MetricsWriter is header-only; this unit anchors the header in the library.
