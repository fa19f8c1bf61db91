use proptest::prelude::*;
use redt::formats::{decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, read_checkpoint, write_checkpoint};
use redt_core::numerics::{ParamKind, ParamStore, Tensor};

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
    prop::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n))
    })
}

proptest! {
    #[test]
    fn tensor_round_trip_is_bitwise((shape, data) in shape_and_data()) {
        let mut bytes = Vec::new();
        encode_tensor(&shape, &data, &mut bytes);
        let t = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(t.shape(), &shape[..]);
        let back: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back, orig);
    }

    #[test]
    fn any_truncation_is_rejected((shape, data) in shape_and_data(), cut in 0usize..1000) {
        let mut bytes = Vec::new();
        encode_tensor(&shape, &data, &mut bytes);
        let cut = cut % bytes.len();
        let err = decode_tensor(&bytes[..cut]).unwrap_err();
        prop_assert!(err.offset <= cut);
    }
}

#[test]
fn checkpoint_round_trip_through_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::<f32>::new();
    store.register("a.weight", Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -7.25, 1e-30]).unwrap(), ParamKind::Weight).unwrap();
    store.register("a.bias", Tensor::new(vec![1], vec![0.5]).unwrap(), ParamKind::NoDecay).unwrap();
    store.register("bn.running_var", Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(), ParamKind::Buffer).unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &store).unwrap();

    let mut fresh = ParamStore::<f32>::new();
    fresh.register("a.weight", Tensor::zeros(&[2, 3]), ParamKind::Weight).unwrap();
    fresh.register("a.bias", Tensor::zeros(&[1]), ParamKind::NoDecay).unwrap();
    fresh.register("bn.running_var", Tensor::zeros(&[1, 1, 1]), ParamKind::Buffer).unwrap();
    read_checkpoint(&path, &mut fresh).unwrap();
    for (a, b) in store.entries().iter().zip(fresh.entries()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
    }

    let mut other = ParamStore::<f32>::new();
    other.register("a.weight", Tensor::zeros(&[3, 2]), ParamKind::Weight).unwrap();
    let err = read_checkpoint(&path, &mut other).unwrap_err().to_string();
    assert!(err.contains("a.weight") && err.contains("unexpected `a.bias`"), "{err}");
}

#[test]
fn checkpoint_records_keep_order_and_reject_duplicates() {
    let bytes = encode_checkpoint([("x", &[2usize][..], vec![1.0, 2.0]), ("y", &[1usize][..], vec![3.0])]);
    let recs = decode_checkpoint(&bytes).unwrap();
    assert_eq!(recs.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["x", "y"]);
    let dup = encode_checkpoint([("x", &[1usize][..], vec![1.0]), ("x", &[1usize][..], vec![1.0])]);
    assert!(decode_checkpoint(&dup).unwrap_err().message.contains("duplicate"));
}
