#include <cstdio>

int main() {
  std::puts("ehdk: CLI under construction");
  return 2;
}
