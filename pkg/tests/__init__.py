# vblab tests
