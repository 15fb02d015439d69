// Catch2 v3 amalgamated implementation; supplies main().
#include <catch2/catch_amalgamated.cpp>
