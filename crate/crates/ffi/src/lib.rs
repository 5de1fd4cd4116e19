//! C ABI surface. Placeholder while the core library is under construction.
