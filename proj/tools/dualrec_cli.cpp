#include <cstdio>
int main() { std::puts("dualrec: not wired up yet"); return 0; }
