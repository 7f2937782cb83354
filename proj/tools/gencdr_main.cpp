#include <cstdio>

int main() {
  std::puts("gencdr 0.1.0");
  return 0;
}
