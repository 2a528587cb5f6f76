use pam_cli::render::{slice_png, to_gray, window_bounds, Window};
use pam_core::Plane;

#[test]
fn window_parsing() {
    assert_eq!("auto".parse::<Window>(), Ok(Window::Auto));
    assert_eq!("-100,300".parse::<Window>(), Ok(Window::Range { lo: -100.0, hi: 300.0 }));
    assert_eq!(" 1 , 2 ".parse::<Window>(), Ok(Window::Range { lo: 1.0, hi: 2.0 }));
    assert_eq!("5,5".parse::<Window>(), Ok(Window::Range { lo: 5.0, hi: 5.0 }));
    for bad in ["", "1", "1,2,3", "a,b", "3,1", "nan,1", "1,inf", "Auto"] {
        assert!(bad.parse::<Window>().is_err(), "{bad:?}");
    }
}

#[test]
fn gray_levels_follow_the_window() {
    let plane = Plane::new(5, 1, vec![-10.0f32, 0.0, 50.0, 100.0, 200.0]).unwrap();
    let w = Window::Range { lo: 0.0, hi: 100.0 };
    // Clamped below and above, linear with rounding in between.
    assert_eq!(to_gray(&plane, w), vec![0, 0, 128, 255, 255]);
    assert_eq!(to_gray(&plane, Window::Range { lo: 7.0, hi: 7.0 }), vec![128; 5]);
}

#[test]
fn auto_window_uses_slice_percentiles() {
    let data: Vec<f32> = (0..=200).map(|i| i as f32).collect();
    let plane = Plane::new(201, 1, data).unwrap();
    let (lo, hi) = window_bounds(&plane, Window::Auto);
    assert!((lo - 1.0).abs() < 1e-4 && (hi - 199.0).abs() < 1e-4, "{lo} {hi}");
    let gray = to_gray(&plane, Window::Auto);
    assert_eq!((gray[0], gray[1], gray[199], gray[200]), (0, 0, 255, 255));
    assert!(gray.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn png_round_trips_gray_levels() {
    let plane = Plane::new(3, 2, vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let w = Window::Range { lo: 0.0, hi: 5.0 };
    let bytes = slice_png(&plane, w).unwrap();
    let mut reader = png::Decoder::new(std::io::Cursor::new(&bytes)).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (3, 2));
    assert_eq!(&buf[..info.buffer_size()], to_gray(&plane, w).as_slice());
}
