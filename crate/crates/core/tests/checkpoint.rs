use mmunet_core::mm_unet::{infer_config, read_checkpoint, write_checkpoint, MmUnet, NetworkConfig, WidthMult};
use mmunet_core::Error;

fn encoded(config: &NetworkConfig) -> Vec<u8> {
    let (_, store) = MmUnet::new::<f32>(config).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&store, &mut buf).unwrap();
    buf
}

fn small() -> NetworkConfig {
    NetworkConfig {
        width_mult: WidthMult::new(1, 16).unwrap(),
        input_hw: (32, 32),
        ..NetworkConfig::default()
    }
}

#[test]
fn corrupt_headers_are_format_errors() {
    let good = encoded(&small());
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[4] = 0xFF;
    let truncated = good[..good.len() - 3].to_vec();
    for bad in [magic, version, truncated, Vec::new()] {
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
    }
}

#[test]
fn architecture_is_recovered_from_parameters() {
    for (use_mmc, use_rssg, state_dim, kernel) in [(true, true, 8, 3), (false, true, 4, 3), (true, false, 2, 5), (false, false, 8, 3)] {
        let config = NetworkConfig {
            use_mmc,
            use_rssg,
            ssm_state_dim: state_dim,
            mmc_kernel: kernel,
            ..small()
        };
        let store = read_checkpoint(&mut encoded(&config).as_slice()).unwrap();
        let got = infer_config(&store, (32, 32)).unwrap();
        assert_eq!(got.width_mult, config.width_mult);
        assert_eq!((got.use_mmc, got.use_rssg), (use_mmc, use_rssg));
        if use_mmc {
            assert_eq!(got.mmc_kernel, kernel);
        }
        if use_mmc || use_rssg {
            assert_eq!(got.ssm_state_dim, state_dim);
        }
        let (_, rebuilt) = MmUnet::new::<f32>(&got).unwrap();
        let names = |s: &mmunet_core::params::ParamStore<f32>| s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        assert_eq!(names(&rebuilt), names(&store));
    }
}
