// Configuration is a single value: the service base URL. Read from a
// meta tag so a static deploy can point anywhere, with a same-origin
// default.

export function serviceBaseUrl(doc: Document = document): string {
  const meta = doc.querySelector('meta[name="service-base"]');
  const content = meta?.getAttribute("content")?.trim();
  return content ? content.replace(/\/$/, "") : "";
}
