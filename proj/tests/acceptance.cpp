// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
int main() { std::puts("[FAIL] acceptance harness not written yet"); return 1; }
