# Test package for QGCN
