// Placeholder; grows into the fixture corpus generator.
int main() { return 0; }
