//! Writes a store, dumps its header, and shows the dtype casts.

use mergecheck::guard::fingerprint;
use mergecheck::tensor_store::{cast_tensor, Dtype, Tensor, TensorStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut store = TensorStore::new();
    store.insert("x", Tensor::from_f32(vec![2], &[1.0, 2.0]))?;
    let bytes = store.to_bytes();
    let header_len = u64::from_le_bytes(bytes[..8].try_into()?) as usize;
    println!("header ({header_len} bytes): {}", std::str::from_utf8(&bytes[8..8 + header_len])?);
    println!("data: {:02x?}", &bytes[8 + header_len..]);
    println!("fingerprint: {}", fingerprint(&store).digest);

    let wide = Tensor::from_f32(vec![3], &[1.0 + 1.0 / 256.0, 70000.0, -0.1]);
    for dtype in [Dtype::BF16, Dtype::F16] {
        let cast = cast_tensor(&wide, dtype);
        println!("{dtype}: {:?} (overflowed: {})", cast.tensor.to_f32_vec(), cast.overflowed);
    }

    let round_trip = TensorStore::from_bytes(&bytes)?;
    assert_eq!(round_trip, store);
    Ok(())
}
