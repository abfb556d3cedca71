use std::io::Cursor;

use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb, Rgb32FImage, RgbImage};

use super::{BBox, DatasetError, Result, PAGE_PX};
use crate::tensor::Tensor;

/// A decoded page screenshot at canonical resolution.
pub type PageImage = RgbImage;

/// Decodes a PNG, composites any alpha channel over white and rescales to
/// the canonical 1024×1024 page if needed.
pub fn decode_png(bytes: &[u8]) -> Result<PageImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| DatasetError::Image(e.to_string()))?;
    let rgba = img.to_rgba8();
    let mut rgb = RgbImage::new(rgba.width(), rgba.height());
    for (dst, src) in rgb.pixels_mut().zip(rgba.pixels()) {
        let a = f32::from(src[3]) / 255.0;
        let blend = |c: u8| (f32::from(c) * a + 255.0 * (1.0 - a)).round() as u8;
        *dst = Rgb([blend(src[0]), blend(src[1]), blend(src[2])]);
    }
    if rgb.width() != PAGE_PX || rgb.height() != PAGE_PX {
        rgb = imageops::resize(&rgb, PAGE_PX, PAGE_PX, FilterType::Triangle);
    }
    Ok(rgb)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| DatasetError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

fn to_float(img: &RgbImage) -> Rgb32FImage {
    Rgb32FImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb([
            f32::from(p[0]) / 255.0,
            f32::from(p[1]) / 255.0,
            f32::from(p[2]) / 255.0,
        ])
    })
}

fn resized_tensor(img: &Rgb32FImage, res: u32) -> Tensor<f32> {
    let small = if img.width() == res && img.height() == res {
        img.clone()
    } else {
        imageops::resize(img, res, res, FilterType::Triangle)
    };
    let data: Vec<f32> = small.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(vec![res as usize, res as usize, 3], data).expect("res x res x 3 buffer")
}

/// Page raster bilinearly resized to `res`×`res`×3 with values in [0, 1].
pub fn page_tensor(img: &PageImage, res: u32) -> Tensor<f32> {
    resized_tensor(&to_float(img), res)
}

/// The bbox region (rounded outward to whole pixels) resized to `res`×`res`×3.
pub fn target_crop(img: &PageImage, bbox: &BBox, res: u32) -> Result<Tensor<f32>> {
    bbox.check_bounds()?;
    let x0 = bbox.x.floor() as u32;
    let y0 = bbox.y.floor() as u32;
    let x1 = ((bbox.x + bbox.w).ceil() as u32).min(img.width()).max(x0 + 1);
    let y1 = ((bbox.y + bbox.h).ceil() as u32).min(img.height()).max(y0 + 1);
    let crop = imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image();
    Ok(resized_tensor(&to_float(&crop), res))
}

/// Binary `grid`×`grid` mask of the cells covered by `bbox`, with cell
/// boundaries rounded outward so every target covers at least one cell.
pub fn target_mask(bbox: &BBox, grid: usize) -> Result<Tensor<f32>> {
    bbox.check_bounds()?;
    let cell = f64::from(PAGE_PX) / grid as f64;
    let c0 = ((bbox.x / cell).floor() as usize).min(grid - 1);
    let r0 = ((bbox.y / cell).floor() as usize).min(grid - 1);
    let c1 = (((bbox.x + bbox.w) / cell).ceil() as usize).clamp(c0 + 1, grid);
    let r1 = (((bbox.y + bbox.h) / cell).ceil() as usize).clamp(r0 + 1, grid);
    let mut mask = Tensor::zeros(&[grid, grid]);
    let d = mask.data_mut();
    for r in r0..r1 {
        for c in c0..c1 {
            d[r * grid + c] = 1.0;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(v: u8) -> PageImage {
        RgbImage::from_pixel(PAGE_PX, PAGE_PX, Rgb([v, v, v]))
    }

    #[test]
    fn white_and_black_pages() {
        let w = page_tensor(&solid(255), 512);
        assert_eq!(w.shape(), &[512, 512, 3]);
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let b = page_tensor(&solid(0), 512);
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_mean_is_half() {
        let img = RgbImage::from_fn(PAGE_PX, PAGE_PX, |x, y| {
            let v = if (x + y) % 2 == 0 { 255 } else { 0 };
            Rgb([v, v, v])
        });
        let t = page_tensor(&img, 512);
        let mean = t.sum() / t.numel() as f32;
        assert!((mean - 0.5).abs() < 1e-2, "{mean}");
    }

    #[test]
    fn alpha_composites_over_white() {
        let rgba = image::RgbaImage::from_pixel(4, 4, image::Rgba([0, 0, 0, 0]));
        let mut buf = Cursor::new(Vec::new());
        rgba.write_to(&mut buf, ImageFormat::Png).unwrap();
        let page = decode_png(&buf.into_inner()).unwrap();
        assert_eq!(page.dimensions(), (PAGE_PX, PAGE_PX));
        assert_eq!(page.get_pixel(10, 10), &Rgb([255, 255, 255]));
    }

    #[test]
    fn undecodable_png_errors() {
        assert!(matches!(decode_png(b"not a png"), Err(DatasetError::Image(_))));
    }

    #[test]
    fn full_page_crop_and_mask() {
        let img = RgbImage::from_fn(PAGE_PX, PAGE_PX, |x, _| Rgb([(x / 4) as u8, 0, 0]));
        let full = BBox::new(0.0, 0.0, 1024.0, 1024.0);
        let crop = target_crop(&img, &full, 64).unwrap();
        assert_eq!(crop, page_tensor(&img, 64));
        let mask = target_mask(&full, 64).unwrap();
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_cell_mask() {
        let mask = target_mask(&BBox::new(0.0, 0.0, 16.0, 16.0), 64).unwrap();
        assert_eq!(mask.sum(), 1.0);
        assert_eq!(mask.data()[0], 1.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(target_mask(&BBox::new(5.0, 5.0, 0.0, 10.0), 64).is_err());
        assert!(target_crop(&solid(0), &BBox::new(5.0, 5.0, 10.0, 0.0), 64).is_err());
    }
}
