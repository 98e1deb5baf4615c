fn main() { let _ = sepformer_core::placeholder(); }
