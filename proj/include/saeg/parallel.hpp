#pragma once

namespace saeg {

// Worker count used by the row-parallel kernels. Resolution order:
// set_thread_cap() > SAE_GROUPS_THREADS env var > hardware concurrency.
int thread_cap();
void set_thread_cap(int n);

} // namespace saeg
