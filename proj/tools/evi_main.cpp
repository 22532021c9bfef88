#include <cstdio>

int main() {
  std::puts("evi: not yet wired up");
  return 2;
}
